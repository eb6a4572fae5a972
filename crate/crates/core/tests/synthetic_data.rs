//! Dataset-level checks that need the classifiers: the synthetic generator
//! must produce linearly learnable class signal on raw pixels.

use fewshot_core::data::{generate_synthetic_dataset, Split};
use fewshot_core::tensor::Tensor;

/// Plain multinomial logistic regression on raw pixels, full-batch gradient
/// descent. Deliberately independent of the crate's episodic classifier.
fn pixel_probe_accuracy(features: &[Tensor], labels: &[usize], classes: usize) -> f64 {
    let n = features.len();
    let dim = features[0].len();
    let lambda = 1e-4;
    let step = 0.5;
    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    for _ in 0..4000 {
        let mut gw = vec![0.0f64; classes * dim];
        let mut gb = vec![0.0f64; classes];
        for (x, &y) in features.iter().zip(labels) {
            let mut logits = vec![0.0f64; classes];
            for c in 0..classes {
                logits[c] = b[c]
                    + x.data()
                        .iter()
                        .zip(&w[c * dim..(c + 1) * dim])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..classes {
                let p = exps[c] / denom - if c == y { 1.0 } else { 0.0 };
                for d in 0..dim {
                    gw[c * dim + d] += p * x.data()[d] / n as f64;
                }
                gb[c] += p / n as f64;
            }
        }
        for k in 0..classes * dim {
            w[k] -= step * (gw[k] + lambda * w[k]);
        }
        for c in 0..classes {
            b[c] -= step * gb[c];
        }
    }
    let mut correct = 0;
    for (x, &y) in features.iter().zip(labels) {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..classes {
            let v = b[c]
                + x.data()
                    .iter()
                    .zip(&w[c * dim..(c + 1) * dim])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[test]
fn base_split_is_linearly_learnable_from_pixels() {
    let ds = generate_synthetic_dataset(20, 20, 16, 4, 99).unwrap();
    let base_classes = ds.classes(Split::Base);
    let label_of = |id: usize| base_classes.iter().position(|(cid, _)| *cid == id).unwrap();
    let features: Vec<Tensor> = ds
        .base
        .iter()
        .map(|r| Tensor::vector(r.image.data().to_vec()))
        .collect();
    let labels: Vec<usize> = ds.base.iter().map(|r| label_of(r.class_id)).collect();
    let acc = pixel_probe_accuracy(&features, &labels, base_classes.len());
    assert!(
        acc > 0.9,
        "pixel probe reached only {acc:.3}; the generator lost its class signal"
    );
}
