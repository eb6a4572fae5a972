//! Episodic test protocol and classifiers.
//!
//! Supports are encoded with their own class-name embedding (when a prompt
//! module is supplied), queries are always encoded unprompted. Per-episode
//! accuracy is aggregated into a mean with a 95% confidence half-width of
//! `1.96 * sample_std / sqrt(episodes)`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{compute_prototypes, mix_seed, sample_episode, DatasetRecord};
use crate::embeddings::ClassEmbeddingTable;
use crate::encoder::{self, Encoder};
use crate::error::{Error, Result};
use crate::nn::cosine_similarity;
use crate::prompt::{encode_with_prompt_traced, Mechanism, PromptModule};
use crate::tensor::Tensor;

/// Episode-level classifier choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classifier {
    /// Nearest prototype by cosine similarity.
    CosineNn,
    /// Multinomial logistic regression fit on the support set.
    LogReg,
}

impl Classifier {
    pub fn name(&self) -> &'static str {
        match self {
            Classifier::CosineNn => "nn",
            Classifier::LogReg => "lr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(Classifier::CosineNn),
            "lr" => Ok(Classifier::LogReg),
            other => Err(Error::Config(format!("unknown classifier {other:?}"))),
        }
    }
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Nearest prototype by cosine similarity; ties go to the lowest index.
pub fn classify_cosine(query_features: &[Tensor], prototypes: &[Tensor]) -> Result<Vec<usize>> {
    if prototypes.is_empty() {
        return Err(Error::Input("no prototypes".into()));
    }
    let mut out = Vec::with_capacity(query_features.len());
    for q in query_features {
        let sims: Vec<f64> = prototypes
            .iter()
            .map(|p| cosine_similarity(q, p))
            .collect::<Result<_>>()?;
        out.push(argmax_lowest(&sims));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

/// Fitted multinomial logistic regression.
#[derive(Debug, Clone)]
pub struct LogRegModel {
    /// `(num_classes, dim)` weights.
    pub w: Tensor,
    pub b: Tensor,
}

impl LogRegModel {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.w.matvec(x)?.add(&self.b)
    }
}

fn l2_normalized(x: &Tensor) -> Result<Tensor> {
    let n = x.norm();
    if n == 0.0 {
        return Err(Error::Numeric("zero-norm feature".into()));
    }
    Ok(x.map(|v| v / n))
}

/// Full-batch gradient descent on the L2-regularized multinomial logistic
/// objective, run to gradient norm `tol`. Deterministic and seed-free: the
/// objective is strictly convex and the step size is fixed from a smoothness
/// bound for unit-norm features.
pub fn fit_logreg(
    features: &[Tensor],
    labels: &[usize],
    num_classes: usize,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LogRegModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Input("features/labels mismatch".into()));
    }
    if num_classes < 2 {
        return Err(Error::Input("need at least 2 classes".into()));
    }
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Input(format!("label {y} out of range {num_classes}")));
        }
    }
    let normalized: Vec<Tensor> = features
        .iter()
        .map(l2_normalized)
        .collect::<Result<_>>()?;
    let dim = normalized[0].len();
    let n = normalized.len() as f64;
    let mut w = Tensor::zeros(&[num_classes, dim]);
    let mut b = Tensor::zeros(&[num_classes]);
    // softmax Hessian is bounded by I/2 and augmented features have
    // squared norm 2, so the objective is (1 + lambda)-smooth
    let step = 1.0 / (1.0 + lambda);

    for _ in 0..max_iter {
        let mut gw = vec![0.0; num_classes * dim];
        let mut gb = vec![0.0; num_classes];
        for (x, &y) in normalized.iter().zip(labels) {
            let logits = w.matvec(x)?.add(&b)?;
            let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.data().iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..num_classes {
                let p = exps[c] / denom - if c == y { 1.0 } else { 0.0 };
                for d in 0..dim {
                    gw[c * dim + d] += p * x.data()[d] / n;
                }
                gb[c] += p / n;
            }
        }
        for c in 0..num_classes {
            for d in 0..dim {
                gw[c * dim + d] += lambda * w.at2(c, d);
            }
        }
        let grad_norm = (gw.iter().map(|g| g * g).sum::<f64>()
            + gb.iter().map(|g| g * g).sum::<f64>())
        .sqrt();
        if grad_norm <= tol {
            return Ok(LogRegModel { w, b });
        }
        for (wk, gk) in w.data_mut().iter_mut().zip(&gw) {
            *wk -= step * gk;
        }
        for (bk, gk) in b.data_mut().iter_mut().zip(&gb) {
            *bk -= step * gk;
        }
    }
    Err(Error::Convergence(format!(
        "logistic regression did not reach gradient norm {tol} in {max_iter} iterations"
    )))
}

/// Fits logistic regression on the L2-normalized support set and classifies
/// the (also normalized) queries by argmax logit.
pub fn classify_logreg(
    support_features: &[Tensor],
    support_labels: &[usize],
    query_features: &[Tensor],
) -> Result<Vec<usize>> {
    let num_classes = support_labels.iter().copied().max().map_or(0, |m| m + 1);
    let distinct: std::collections::BTreeSet<usize> = support_labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Input(
            "logistic regression needs at least 2 classes in the support set".into(),
        ));
    }
    let model = fit_logreg(support_features, support_labels, num_classes, 1.0, 1e-6, 10_000)?;
    let mut out = Vec::with_capacity(query_features.len());
    for q in query_features {
        let logits = model.logits(&l2_normalized(q)?)?;
        out.push(argmax_lowest(logits.data()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

/// Default number of test episodes.
pub const DEFAULT_EPISODES: usize = 2000;

/// Aggregated episodic results.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_episode_acc: Vec<f64>,
    pub mean_acc: f64,
    pub ci95_halfwidth: f64,
    pub way: usize,
    pub shot: usize,
    pub episodes: usize,
    pub classifier: &'static str,
    pub mechanism: &'static str,
}

/// Mean and `1.96 * sample_std / sqrt(n)` of an accuracy list.
pub fn mean_and_ci95(acc: &[f64]) -> (f64, f64) {
    if acc.is_empty() {
        return (0.0, 0.0);
    }
    if acc.iter().all(|&a| a == acc[0]) {
        // a constant list has exactly zero spread; avoid rounding residue
        return (acc[0], 0.0);
    }
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

impl EvalReport {
    pub fn from_accuracies(
        per_episode_acc: Vec<f64>,
        way: usize,
        shot: usize,
        classifier: &'static str,
        mechanism: &'static str,
    ) -> Self {
        let (mean_acc, ci95_halfwidth) = mean_and_ci95(&per_episode_acc);
        EvalReport {
            episodes: per_episode_acc.len(),
            per_episode_acc,
            mean_acc,
            ci95_halfwidth,
            way,
            shot,
            classifier,
            mechanism,
        }
    }

    /// `mean ± halfwidth` at four decimal places.
    pub fn summary_line(&self) -> String {
        format!("{:.4} \u{00b1} {:.4}", self.mean_acc, self.ci95_halfwidth)
    }

    /// Full plain-text summary with the configuration echo.
    pub fn summary_text(&self) -> String {
        format!(
            "{}-way {}-shot, {} episodes, classifier {}, mechanism {}: {}\n",
            self.way,
            self.shot,
            self.episodes,
            self.classifier,
            self.mechanism,
            self.summary_line()
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,accuracy\n");
        for (i, a) in self.per_episode_acc.iter().enumerate() {
            out.push_str(&format!("{i},{a}\n"));
        }
        out
    }
}

const EVAL_TAG: u64 = 0x4556_414c;

/// Runs `num_episodes` independent episodes over `records` and aggregates
/// their accuracies. Deterministic given (weights, records, seed); episodes
/// are evaluated in parallel and reduced in index order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    enc: &Encoder,
    prompt: Option<(&PromptModule, &ClassEmbeddingTable)>,
    records: &[DatasetRecord],
    way: usize,
    shot: usize,
    queries_per_class: usize,
    num_episodes: usize,
    classifier: Classifier,
    seed: u64,
) -> Result<EvalReport> {
    if num_episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    let per_episode: Vec<f64> = (0..num_episodes)
        .into_par_iter()
        .map(|idx| {
            let ep_seed = mix_seed(&[seed, EVAL_TAG, idx as u64]);
            episode_accuracy(
                enc,
                prompt,
                records,
                way,
                shot,
                queries_per_class,
                classifier,
                ep_seed,
            )
        })
        .collect::<Result<_>>()?;
    let mechanism = prompt.map_or("none", |(pm, _)| pm.cfg.mechanism.name());
    Ok(EvalReport::from_accuracies(
        per_episode,
        way,
        shot,
        classifier.name(),
        mechanism,
    ))
}

#[allow(clippy::too_many_arguments)]
fn episode_accuracy(
    enc: &Encoder,
    prompt: Option<(&PromptModule, &ClassEmbeddingTable)>,
    records: &[DatasetRecord],
    way: usize,
    shot: usize,
    queries_per_class: usize,
    classifier: Classifier,
    seed: u64,
) -> Result<f64> {
    let episode = sample_episode(records, way, shot, queries_per_class, seed)?;
    // one tape for the whole episode, so the model binds once
    let mut tape = crate::autodiff::Tape::new();
    let enc_vars = crate::encoder::EncoderVars::bind(enc, &mut tape);
    let prompting = prompt.filter(|(pm, _)| pm.cfg.mechanism != Mechanism::None);
    let prompt_vars = prompting.map(|(pm, _)| crate::prompt::PromptVars::bind(pm, &mut tape));
    let mut support_feats: Vec<Tensor> = Vec::with_capacity(way * shot);
    let mut support_labels: Vec<usize> = Vec::with_capacity(way * shot);
    let mut groups: Vec<(String, Vec<Tensor>)> = Vec::with_capacity(way);
    for (class_idx, name) in episode.class_names.iter().enumerate() {
        let mut feats = Vec::with_capacity(shot);
        for rec in &episode.support[class_idx] {
            let patches = encoder::patchify(&rec.image, enc.cfg.patch_size)?;
            let pid = tape.leaf(patches);
            let fid = match (prompting, &prompt_vars) {
                (Some((pm, table)), Some(pv)) => {
                    let g = table.get(name)?;
                    let g_row = tape.leaf(g.reshape(vec![1, g.len()])?);
                    crate::prompt::encode_with_prompt_fwd(
                        &mut tape, &enc_vars, pv, pid, g_row, &enc.cfg, &pm.cfg,
                    )
                }
                _ => encoder::encode_fwd(&mut tape, &enc_vars, pid, &enc.cfg),
            };
            let feat = tape.value(fid).clone();
            support_feats.push(feat.clone());
            support_labels.push(class_idx);
            feats.push(feat);
        }
        groups.push((name.clone(), feats));
    }
    let query_feats: Vec<Tensor> = episode
        .query
        .iter()
        .map(|(rec, _)| {
            let patches = encoder::patchify(&rec.image, enc.cfg.patch_size)?;
            let pid = tape.leaf(patches);
            let fid = encoder::encode_fwd(&mut tape, &enc_vars, pid, &enc.cfg);
            Ok(tape.value(fid).clone())
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = episode.query.iter().map(|(_, y)| *y).collect();

    let predictions = match classifier {
        Classifier::CosineNn => {
            let prototypes: Vec<Tensor> = compute_prototypes(&groups)?
                .into_iter()
                .map(|p| p.vector)
                .collect();
            classify_cosine(&query_feats, &prototypes)?
        }
        Classifier::LogReg => classify_logreg(&support_feats, &support_labels, &query_feats)?,
    };
    let correct = predictions
        .iter()
        .zip(&labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

// ---------------------------------------------------------------------------
// Attention heatmaps
// ---------------------------------------------------------------------------

/// Dot product between the pooled output feature and each patch-position
/// output token, arranged on the patch grid.
pub fn attention_heatmap(
    enc: &Encoder,
    prompt: Option<(&PromptModule, &Tensor)>,
    img: &Tensor,
) -> Result<Tensor> {
    let (feature, final_tokens, extended) = match prompt {
        Some((pm, g)) if pm.cfg.mechanism != Mechanism::None => {
            let trace = encode_with_prompt_traced(enc, pm, img, g)?;
            let last = trace.sequences.last().expect("at least Z_0").clone();
            (trace.feature, last, trace.extended)
        }
        _ => {
            let trace = encoder::encode_traced(enc, img)?;
            let last = trace.sequences.last().expect("at least Z_0").clone();
            (trace.feature, last, false)
        }
    };
    let grid = enc.cfg.patches_per_side();
    let m = enc.cfg.num_patches();
    let offset = usize::from(extended);
    let mut heat = vec![0.0; m];
    for i in 0..m {
        let row = Tensor::vector(final_tokens.row(i + offset).to_vec());
        heat[i] = feature.dot(&row)?;
    }
    Tensor::matrix(grid, grid, heat)
}

/// Writes a heatmap as CSV rows.
pub fn write_heatmap_csv(path: impl AsRef<Path>, heat: &Tensor) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    let mut out = String::new();
    for r in 0..heat.rows() {
        let cells: Vec<String> = heat.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(&path_str, e))
}

/// Writes a heatmap as an 8-bit binary PGM, min-max normalized to [0, 255].
/// A constant map writes all zeros.
pub fn write_heatmap_pgm(path: impl AsRef<Path>, heat: &Tensor) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    let (min, max) = heat
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = max - min;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(format!("P5\n{} {}\n255\n", heat.cols(), heat.rows()).as_bytes());
    for &v in heat.data() {
        let scaled = if span > 0.0 {
            ((v - min) / span * 255.0).round() as u8
        } else {
            0u8
        };
        bytes.push(scaled);
    }
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(&path_str, e))
}

/// Computes the heatmap and writes `<base>.csv` and `<base>.pgm`.
pub fn dump_attention(
    enc: &Encoder,
    prompt: Option<(&PromptModule, &Tensor)>,
    img: &Tensor,
    out_base: impl AsRef<Path>,
) -> Result<Tensor> {
    let heat = attention_heatmap(enc, prompt, img)?;
    let base = out_base.as_ref();
    let csv = base.with_extension("csv");
    let pgm = base.with_extension("pgm");
    write_heatmap_csv(&csv, &heat)?;
    write_heatmap_pgm(&pgm, &heat)?;
    Ok(heat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::encoder::ModelConfig;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_classifier_picks_matching_prototype() {
        let protos = vec![
            Tensor::vector(vec![1.0, 0.0, 0.0]),
            Tensor::vector(vec![0.0, 1.0, 0.0]),
            Tensor::vector(vec![0.0, 0.0, 1.0]),
        ];
        for i in 0..3 {
            let out = classify_cosine(std::slice::from_ref(&protos[i]), &protos).unwrap();
            assert_eq!(out, vec![i]);
        }
    }

    #[test]
    fn cosine_classifier_is_scale_invariant() {
        let protos = vec![
            Tensor::vector(vec![0.8, 0.3]),
            Tensor::vector(vec![-0.5, 1.0]),
        ];
        let q = Tensor::vector(vec![0.7, 0.4]);
        let a = classify_cosine(&[q.clone()], &protos).unwrap();
        let b = classify_cosine(&[q.scale(1234.5)], &protos).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cosine_classifier_matches_bruteforce_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        for _ in 0..20 {
            let protos: Vec<Tensor> = (0..3)
                .map(|_| Tensor::vector((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let queries: Vec<Tensor> = (0..7)
                .map(|_| Tensor::vector((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let got = classify_cosine(&queries, &protos).unwrap();
            for (q, &pred) in queries.iter().zip(&got) {
                let mut best = 0;
                let mut best_sim = f64::NEG_INFINITY;
                for (i, p) in protos.iter().enumerate() {
                    let sim = q.dot(p).unwrap() / (q.norm() * p.norm());
                    if sim > best_sim {
                        best_sim = sim;
                        best = i;
                    }
                }
                assert_eq!(pred, best);
            }
        }
    }

    #[test]
    fn logreg_separates_linearly_separable_classes() {
        let support = vec![
            Tensor::vector(vec![1.0, 0.1]),
            Tensor::vector(vec![0.9, -0.1]),
            Tensor::vector(vec![-1.0, 0.1]),
            Tensor::vector(vec![-0.9, -0.1]),
        ];
        let labels = vec![0, 0, 1, 1];
        let queries = vec![
            Tensor::vector(vec![0.95, 0.0]),
            Tensor::vector(vec![-0.95, 0.0]),
        ];
        let out = classify_logreg(&support, &labels, &queries).unwrap();
        assert_eq!(out, vec![0, 1]);
    }

    #[test]
    fn logreg_duplicated_support_gives_same_logits() {
        let support = vec![
            Tensor::vector(vec![1.0, 0.3]),
            Tensor::vector(vec![-0.8, 0.5]),
            Tensor::vector(vec![0.2, -1.0]),
        ];
        let labels = vec![0, 1, 2];
        let mut doubled = support.clone();
        doubled.extend(support.iter().cloned());
        let mut doubled_labels = labels.clone();
        doubled_labels.extend(labels.iter().copied());

        let m1 = fit_logreg(&support, &labels, 3, 1.0, 1e-6, 10_000).unwrap();
        let m2 = fit_logreg(&doubled, &doubled_labels, 3, 1.0, 1e-6, 10_000).unwrap();
        let q = l2_normalized(&Tensor::vector(vec![0.4, 0.4])).unwrap();
        let l1 = m1.logits(&q).unwrap();
        let l2 = m2.logits(&q).unwrap();
        for (a, b) in l1.data().iter().zip(l2.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
    }

    #[test]
    fn logreg_needs_two_classes() {
        let support = vec![Tensor::vector(vec![1.0, 0.0])];
        assert!(matches!(
            classify_logreg(&support, &[0], &support),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn logreg_agrees_with_cosine_on_separated_clusters() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let centers = [
            Tensor::vector(vec![3.0, 0.0, 0.0]),
            Tensor::vector(vec![0.0, 3.0, 0.0]),
            Tensor::vector(vec![0.0, 0.0, 3.0]),
        ];
        let mut support = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..5 {
                let noise: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.3..0.3)).collect();
                support.push(center.add(&Tensor::vector(noise)).unwrap());
                labels.push(c);
            }
        }
        let mut queries = Vec::new();
        for center in &centers {
            for _ in 0..20 {
                let noise: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.3..0.3)).collect();
                queries.push(center.add(&Tensor::vector(noise)).unwrap());
            }
        }
        let protos: Vec<Tensor> = centers.to_vec();
        let nn = classify_cosine(&queries, &protos).unwrap();
        let lr = classify_logreg(&support, &labels, &queries).unwrap();
        let agree = nn.iter().zip(&lr).filter(|(a, b)| a == b).count();
        assert!(
            agree as f64 / nn.len() as f64 >= 0.95,
            "agreement {agree}/{}",
            nn.len()
        );
    }

    #[test]
    fn ci_statistics_match_hand_computed_values() {
        let (mean, hw) = mean_and_ci95(&[0.8; 7]);
        assert_abs_diff_eq!(mean, 0.8, epsilon = 1e-15);
        assert_eq!(hw, 0.0);

        let (mean, hw) = mean_and_ci95(&[1.0, 0.0]);
        assert_abs_diff_eq!(mean, 0.5, epsilon = 1e-15);
        // sample std = sqrt(0.5), hw = 1.96 * sqrt(0.5) / sqrt(2) = 0.98
        assert_abs_diff_eq!(hw, 0.98, epsilon = 1e-12);

        let (_, hw1) = mean_and_ci95(&[0.6]);
        assert_eq!(hw1, 0.0);
    }

    #[test]
    fn report_is_internally_consistent() {
        let accs = vec![0.2, 0.4, 1.0, 0.8, 0.6];
        let report = EvalReport::from_accuracies(accs.clone(), 5, 1, "nn", "none");
        let (mean, hw) = mean_and_ci95(&accs);
        assert_eq!(report.mean_acc, mean);
        assert_eq!(report.ci95_halfwidth, hw);
        assert_eq!(report.episodes, 5);
        assert!(report.summary_line().contains('\u{00b1}'));
        assert_eq!(report.to_csv().lines().count(), 6);
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            depth: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            activation: crate::nn::Activation::GeluTanh,
            ln_eps: 1e-5,
            scale_exponent: 0.25,
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_bounded() {
        let ds = generate_synthetic_dataset(8, 6, 8, 4, 17).unwrap();
        let enc = Encoder::init(tiny_model(), 23).unwrap();
        let r1 = evaluate(&enc, None, &ds.novel, 2, 1, 3, 20, Classifier::CosineNn, 7).unwrap();
        let r2 = evaluate(&enc, None, &ds.novel, 2, 1, 3, 20, Classifier::CosineNn, 7).unwrap();
        assert_eq!(r1.per_episode_acc, r2.per_episode_acc);
        assert!(r1.mean_acc >= 0.0 && r1.mean_acc <= 1.0);
        // different seeds sample different episodes (accuracies may tie)
        let e1 = sample_episode(&ds.novel, 2, 1, 3, mix_seed(&[7, EVAL_TAG, 0])).unwrap();
        let e2 = sample_episode(&ds.novel, 2, 1, 3, mix_seed(&[8, EVAL_TAG, 0])).unwrap();
        assert!(
            e1.class_names != e2.class_names
                || e1.query.iter().zip(&e2.query).any(|(a, b)| a.0.image != b.0.image)
        );
    }

    #[test]
    fn classifier_choice_is_independent_of_shot_count() {
        // both classifiers run at 1-shot and at 5-shot
        let ds = generate_synthetic_dataset(8, 8, 8, 4, 19).unwrap();
        let enc = Encoder::init(tiny_model(), 29).unwrap();
        for classifier in [Classifier::CosineNn, Classifier::LogReg] {
            for shot in [1usize, 5] {
                let r = evaluate(&enc, None, &ds.novel, 2, shot, 2, 6, classifier, 31).unwrap();
                assert_eq!(r.shot, shot);
                assert_eq!(r.classifier, classifier.name());
                assert!(r.mean_acc >= 0.0 && r.mean_acc <= 1.0);
            }
        }
    }

    #[test]
    fn heatmap_is_constant_for_identical_tokens() {
        let cfg = tiny_model();
        let mut enc = Encoder::zeros(cfg).unwrap();
        // identical position embeddings -> identical tokens everywhere
        for r in 0..enc.pos.value.rows() {
            for c in 0..8 {
                enc.pos.value.data_mut()[r * 8 + c] = (c as f64) * 0.1 - 0.3;
            }
        }
        let img = Tensor::new(vec![8, 8, 1], vec![0.4; 64]).unwrap();
        let heat = attention_heatmap(&enc, None, &img).unwrap();
        assert_eq!(heat.shape(), &[2, 2]);
        let first = heat.data()[0];
        for &v in heat.data() {
            assert_abs_diff_eq!(v, first, epsilon = 1e-12);
        }
    }

    #[test]
    fn heatmap_files_have_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let enc = Encoder::init(tiny_model(), 31).unwrap();
        let img = Tensor::new(
            vec![8, 8, 1],
            (0..64).map(|i| (i as f64) / 64.0).collect(),
        )
        .unwrap();
        let base = dir.path().join("heat");
        let heat = dump_attention(&enc, None, &img, &base).unwrap();
        assert_eq!(heat.shape(), &[2, 2]);
        let csv = fs::read_to_string(dir.path().join("heat.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        let pgm = fs::read(dir.path().join("heat.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pgm.len(), "P5\n2 2\n255\n".len() + 4);
    }
}
