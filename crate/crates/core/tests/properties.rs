//! Property tests for the numeric invariants.

use fewshot_core::data::generate_synthetic_dataset;
use fewshot_core::encoder::{ModelConfig, TokenSequence};
use fewshot_core::evaluation::mean_and_ci95;
use fewshot_core::nn::{self, Activation, AttentionConfig};
use fewshot_core::prompt::{
    channel_gate, CiInner, Mechanism, Pooling, ProjectorKind, PromptConfig, PromptModule,
};
use fewshot_core::tensor::Tensor;
use fewshot_core::training::meta_loss;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn finite_vec(len: std::ops::Range<usize>, lim: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-lim..lim, len)
}

proptest! {
    #[test]
    fn softmax_sums_to_one(v in finite_vec(1..9, 1e6)) {
        let out = nn::softmax(&Tensor::vector(v), 0).unwrap();
        let sum: f64 = out.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {sum}");
        prop_assert!(out.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(v in finite_vec(2..9, 100.0), c in -50.0f64..50.0) {
        let a = nn::softmax(&Tensor::vector(v.clone()), 0).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = nn::softmax(&Tensor::vector(shifted), 0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in 0u64..5000, s in 2usize..6) {
        let width = 8;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let z = Tensor::matrix(
            s,
            width,
            (0..s * width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ).unwrap();
        let w_qkv = Tensor::matrix(
            width,
            3 * width,
            (0..3 * width * width).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        ).unwrap();
        let w_out = Tensor::matrix(
            width,
            width,
            (0..width * width).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        ).unwrap();
        let cfg = AttentionConfig::new(2, 4);
        let params = nn::MsaParams { w_qkv: &w_qkv, w_out: &w_out };
        let out = nn::multihead_self_attention(&z, params, &cfg).unwrap();

        // rotate rows as the permutation
        let mut perm: Vec<usize> = (0..s).collect();
        perm.rotate_left(1);
        let mut pz = vec![0.0; s * width];
        for (dst, &src) in perm.iter().enumerate() {
            pz[dst * width..(dst + 1) * width].copy_from_slice(z.row(src));
        }
        let params = nn::MsaParams { w_qkv: &w_qkv, w_out: &w_out };
        let pout = nn::multihead_self_attention(
            &Tensor::matrix(s, width, pz).unwrap(),
            params,
            &cfg,
        ).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..width {
                let diff = (pout.at2(dst, c) - out.at2(src, c)).abs();
                prop_assert!(diff <= 1e-12, "row {src}->{dst} col {c}: {diff}");
            }
        }
    }

    #[test]
    fn channel_gate_stays_in_unit_interval(seed in 0u64..2000) {
        let model = ModelConfig {
            image_size: 8, channels: 1, patch_size: 4, depth: 1, width: 8, heads: 2,
            mlp_ratio: 2, activation: Activation::GeluTanh, ln_eps: 1e-5, scale_exponent: 0.25,
        };
        let pcfg = PromptConfig {
            inject_layer: 1,
            mechanism: Mechanism::Ci,
            projector_kind: ProjectorKind::Linear,
            pooling: Pooling::All,
            semantic_dim: 5,
            ci_inner: CiInner::Sigmoid,
        };
        let pm = PromptModule::init(pcfg, &model, seed).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xBEEF);
        let tokens = Tensor::matrix(
            4, 8,
            (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        ).unwrap();
        let g = Tensor::vector((0..5).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let gate = channel_gate(&TokenSequence::new(tokens).unwrap(), &g, &pm).unwrap();
        for &b in gate.data() {
            prop_assert!(b > 0.0 && b < 1.0, "gate {b} escaped (0,1)");
        }
    }

    #[test]
    fn meta_loss_ignores_positive_rescaling(
        qscale in 1e-3f64..1e3,
        pscale in 1e-3f64..1e3,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let protos: Vec<Tensor> = (0..3)
            .map(|_| Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0) + 0.1).collect()))
            .collect();
        let queries: Vec<Tensor> = (0..4)
            .map(|_| Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0) + 0.1).collect()))
            .collect();
        let labels = [0usize, 1, 2, 0];
        let a = meta_loss(&queries, &protos, &labels, 0.2).unwrap();
        let qs: Vec<Tensor> = queries.iter().map(|q| q.scale(qscale)).collect();
        let ps: Vec<Tensor> = protos.iter().map(|p| p.scale(pscale)).collect();
        let b = meta_loss(&qs, &ps, &labels, 0.2).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn report_statistics_are_recomputable(accs in prop::collection::vec(0.0f64..=1.0, 1..50)) {
        let (mean, hw) = mean_and_ci95(&accs);
        let n = accs.len() as f64;
        let mean2 = accs.iter().sum::<f64>() / n;
        prop_assert!((mean - mean2).abs() <= 1e-12);
        if accs.len() > 1 && accs.iter().any(|&a| a != accs[0]) {
            let var = accs.iter().map(|a| (a - mean2) * (a - mean2)).sum::<f64>() / (n - 1.0);
            let hw2 = 1.96 * var.sqrt() / n.sqrt();
            prop_assert!((hw - hw2).abs() <= 1e-12);
        } else {
            prop_assert_eq!(hw, 0.0);
        }
    }

    #[test]
    fn cosine_similarity_stays_in_range(
        a in finite_vec(3..4, 50.0),
        b in finite_vec(3..4, 50.0),
    ) {
        let ta = Tensor::vector(a);
        let tb = Tensor::vector(b);
        if ta.norm() > 0.0 && tb.norm() > 0.0 {
            let c = nn::cosine_similarity(&ta, &tb).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}

#[test]
fn episode_sampling_purity_across_many_seeds() {
    let ds = generate_synthetic_dataset(8, 5, 8, 4, 13).unwrap();
    for seed in 0..50 {
        let a = fewshot_core::data::sample_episode(&ds.base, 3, 1, 2, seed).unwrap();
        let b = fewshot_core::data::sample_episode(&ds.base, 3, 1, 2, seed).unwrap();
        assert_eq!(a.class_names, b.class_names);
        for (x, y) in a.support.iter().flatten().zip(b.support.iter().flatten()) {
            assert_eq!(x.image, y.image);
        }
    }
}
