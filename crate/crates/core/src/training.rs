//! Two-stage optimization.
//!
//! Stage one pre-trains the encoder with a linear classification head by
//! cross entropy over the base classes. Stage two meta-trains encoder and
//! prompt projectors episodically: every support image is encoded with its
//! own class-name embedding, prototypes are class means, queries are encoded
//! unprompted, and the loss is cross entropy over temperature-scaled cosine
//! similarities. The embedding table is never updated.

use crate::autodiff::{Tape, VarId};
use crate::data::{sample_episode, Episode, SplitDataset};
use crate::embeddings::ClassEmbeddingTable;
use crate::encoder::{self, Encoder, EncoderVars, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{self, GradCheckReport, Parameter};
use crate::prompt::{Mechanism, ProjectorKind, PromptConfig, PromptModule, PromptVars};
use crate::tensor::Tensor;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::mix_seed;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    AdamW,
    /// Plain gradient descent (exact single-step semantics, no decay).
    Sgd,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Settings shared by both training stages.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Softmax temperature for the episodic loss.
    pub temperature: f64,
    pub lr_encoder: f64,
    pub lr_projectors: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Pre-training batch size.
    pub batch_size: usize,
    /// Meta-training episodes per epoch.
    pub episodes_per_epoch: usize,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Validation episodes evaluated at the end of each meta epoch (0 skips).
    pub val_episodes_per_epoch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub prompt: PromptConfig,
}

impl TrainConfig {
    pub fn pretrain_desk(seed: u64) -> Self {
        TrainConfig {
            temperature: 0.2,
            lr_encoder: 1e-3,
            lr_projectors: 1e-3,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 32,
            episodes_per_epoch: 100,
            way: 5,
            shot: 1,
            queries_per_class: 15,
            val_episodes_per_epoch: 0,
            seed,
            optimizer: OptimizerKind::AdamW,
            prompt: PromptConfig::new(4, 32),
        }
    }

    pub fn meta_desk(prompt: PromptConfig, seed: u64) -> Self {
        TrainConfig {
            temperature: 0.2,
            lr_encoder: 1e-4,
            lr_projectors: 1e-3,
            weight_decay: 1e-4,
            epochs: 3,
            batch_size: 32,
            episodes_per_epoch: 100,
            way: 5,
            shot: 1,
            queries_per_class: 15,
            val_episodes_per_epoch: 0,
            seed,
            optimizer: OptimizerKind::AdamW,
            prompt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.lr_encoder < 0.0 || self.lr_projectors < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates and decay must be >= 0".into()));
        }
        if self.way == 0 || self.shot == 0 {
            return Err(Error::Config("way and shot must be positive".into()));
        }
        Ok(())
    }
}

/// Linear classification head for pre-training: `logits = W f + b`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: Parameter,
    pub b: Parameter,
}

impl ClassifierHead {
    pub fn zeros(num_classes: usize, width: usize) -> Self {
        ClassifierHead {
            w: Parameter::new("head.w", Tensor::zeros(&[num_classes, width])),
            b: Parameter::new("head.b", Tensor::zeros(&[num_classes])),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.value.rows()
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Cross entropy of one feature batch under the linear head, on the tape.
pub fn pretrain_loss_fwd(
    tape: &mut Tape,
    features: &[VarId],
    labels: &[usize],
    head_w: VarId,
    head_b: VarId,
) -> VarId {
    debug_assert_eq!(features.len(), labels.len());
    let mut per_sample = Vec::with_capacity(features.len());
    for (&f, &y) in features.iter().zip(labels) {
        let logits = tape.matvec(head_w, f);
        let logits = tape.add(logits, head_b);
        let lse = tape.logsumexp(logits);
        let pick = tape.index_scalar(logits, y);
        per_sample.push(tape.sub(lse, pick));
    }
    let stacked = tape.stack_scalars(&per_sample);
    tape.mean_vec(stacked)
}

/// Mean cross entropy `-log softmax(W f + b)[y]` over a feature batch.
pub fn pretrain_loss(features: &[Tensor], labels: &[usize], head: &ClassifierHead) -> Result<f64> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let classes = head.num_classes();
    for &y in labels {
        if y >= classes {
            return Err(Error::Input(format!("label {y} out of range {classes}")));
        }
    }
    let width = head.w.value.cols();
    let mut tape = Tape::new();
    let head_w = tape.leaf(head.w.value.clone());
    let head_b = tape.leaf(head.b.value.clone());
    let ids: Vec<VarId> = features
        .iter()
        .map(|f| {
            if f.shape() != [width] {
                return Err(Error::Shape(format!(
                    "feature shape {:?}, want ({width})",
                    f.shape()
                )));
            }
            Ok(tape.leaf(f.clone()))
        })
        .collect::<Result<_>>()?;
    let loss = pretrain_loss_fwd(&mut tape, &ids, labels, head_w, head_b);
    Ok(tape.value(loss).item())
}

/// Episodic loss on the tape: cross entropy over cosine-similarity logits
/// divided by the temperature.
pub fn meta_loss_fwd(
    tape: &mut Tape,
    query_features: &[VarId],
    prototypes: &[VarId],
    query_labels: &[usize],
    temperature: f64,
) -> VarId {
    debug_assert_eq!(query_features.len(), query_labels.len());
    let mut per_query = Vec::with_capacity(query_features.len());
    for (&q, &y) in query_features.iter().zip(query_labels) {
        let sims: Vec<VarId> = prototypes.iter().map(|&p| tape.cosine(q, p)).collect();
        let logits = tape.stack_scalars(&sims);
        let logits = tape.mul_scalar(logits, 1.0 / temperature);
        let lse = tape.logsumexp(logits);
        let pick = tape.index_scalar(logits, y);
        per_query.push(tape.sub(lse, pick));
    }
    let stacked = tape.stack_scalars(&per_query);
    tape.mean_vec(stacked)
}

/// Episodic prototype loss at value level.
pub fn meta_loss(
    query_features: &[Tensor],
    prototypes: &[Tensor],
    query_labels: &[usize],
    temperature: f64,
) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if prototypes.is_empty() || query_features.is_empty() {
        return Err(Error::Input("empty prototypes or queries".into()));
    }
    if query_features.len() != query_labels.len() {
        return Err(Error::Input("label count mismatch".into()));
    }
    for p in prototypes {
        if p.norm() == 0.0 {
            return Err(Error::Numeric("zero-norm prototype".into()));
        }
    }
    for f in query_features {
        if f.norm() == 0.0 {
            return Err(Error::Numeric("zero-norm query feature".into()));
        }
    }
    for &y in query_labels {
        if y >= prototypes.len() {
            return Err(Error::Input(format!(
                "label {y} out of range {}",
                prototypes.len()
            )));
        }
    }
    let mut tape = Tape::new();
    let qs: Vec<VarId> = query_features.iter().map(|f| tape.leaf(f.clone())).collect();
    let ps: Vec<VarId> = prototypes.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = meta_loss_fwd(&mut tape, &qs, &ps, query_labels, temperature);
    Ok(tape.value(loss).item())
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: &[&Parameter]) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state misaligned");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w[k]);
            }
        }
    }
}

/// Plain gradient descent: `theta -= lr * grad`, nothing else.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [&mut Parameter]) {
        for p in params.iter_mut() {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for k in 0..g.len() {
                w[k] -= self.lr * g[k];
            }
        }
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    AdamW(AdamW),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, params: &[&Parameter]) -> Self {
        match kind {
            OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(lr, weight_decay, params)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr }),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) {
        match self {
            Optimizer::AdamW(o) => o.step(params),
            Optimizer::Sgd(o) => o.step(params),
        }
    }
}

// ---------------------------------------------------------------------------
// Curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

/// Loss/accuracy series serialized as `epoch,split,metric,value`.
#[derive(Debug, Clone, Default)]
pub struct TrainCurve(pub Vec<CurvePoint>);

impl TrainCurve {
    pub fn push(&mut self, epoch: usize, split: &'static str, metric: &'static str, value: f64) {
        self.0.push(CurvePoint {
            epoch,
            split,
            metric,
            value,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for p in &self.0 {
            out.push_str(&format!("{},{},{},{}\n", p.epoch, p.split, p.metric, p.value));
        }
        out
    }

    /// Last value of a given (split, metric) series.
    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.0
            .iter()
            .rev()
            .find(|p| p.split == split && p.metric == metric)
            .map(|p| p.value)
    }
}

// ---------------------------------------------------------------------------
// Stage one: supervised pre-training
// ---------------------------------------------------------------------------

/// Sorted class ids of the base split mapped to contiguous labels.
pub fn base_label_map(ds: &SplitDataset) -> Vec<usize> {
    ds.classes(crate::data::Split::Base)
        .into_iter()
        .map(|(id, _)| id)
        .collect()
}

fn label_of(map: &[usize], class_id: usize) -> Result<usize> {
    map.binary_search(&class_id)
        .map_err(|_| Error::Input(format!("class id {class_id} not in the base split")))
}

/// Jointly trains the encoder and classification head on the base split.
/// Returns per-epoch mean loss and accuracy.
pub fn pretrain(
    enc: &mut Encoder,
    head: &mut ClassifierHead,
    ds: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainCurve> {
    cfg.validate()?;
    if ds.base.is_empty() {
        return Err(Error::Input("base split is empty".into()));
    }
    let label_map = base_label_map(ds);
    if head.num_classes() != label_map.len() {
        return Err(Error::Config(format!(
            "head has {} classes, base split has {}",
            head.num_classes(),
            label_map.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    let mut opt = {
        let mut refs: Vec<&Parameter> = enc.parameters();
        refs.push(&head.w);
        refs.push(&head.b);
        Optimizer::new(cfg.optimizer, cfg.lr_encoder, cfg.weight_decay, &refs)
    };

    let mut curve = TrainCurve::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ds.base.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5052_45, epoch as u64]));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let enc_vars = EncoderVars::bind(enc, &mut tape);
            let head_w = tape.leaf(head.w.value.clone());
            let head_b = tape.leaf(head.b.value.clone());
            let mut feats = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let rec = &ds.base[i];
                let patches = encoder::patchify(&rec.image, enc.cfg.patch_size)?;
                let pid = tape.leaf(patches);
                feats.push(encoder::encode_fwd(&mut tape, &enc_vars, pid, &enc.cfg));
                labels.push(label_of(&label_map, rec.class_id)?);
            }
            // batch accuracy from the eager logit values
            for (f, &y) in feats.iter().zip(&labels) {
                let logits = head.w.value.matvec(tape.value(*f))?.add(&head.b.value)?;
                if argmax(logits.data()) == y {
                    correct += 1;
                }
            }
            let loss = pretrain_loss_fwd(&mut tape, &feats, &labels, head_w, head_b);
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("non-finite pre-training loss {loss_value}"),
                });
            }
            loss_sum += loss_value * chunk.len() as f64;

            let grads = tape.backward(loss);
            for (p, id) in enc.parameters_mut().into_iter().zip(enc_vars.flat_ids()) {
                if let Some(g) = grads.get(id) {
                    p.accumulate_grad(g);
                }
            }
            if let Some(g) = grads.get(head_w) {
                head.w.accumulate_grad(g);
            }
            if let Some(g) = grads.get(head_b) {
                head.b.accumulate_grad(g);
            }

            let mut refs: Vec<&mut Parameter> = enc.parameters_mut();
            refs.push(&mut head.w);
            refs.push(&mut head.b);
            opt.step(&mut refs);
            for p in refs {
                p.zero_grad();
            }
            step += 1;
        }
        curve.push(epoch, "train", "loss", loss_sum / ds.base.len() as f64);
        curve.push(epoch, "train", "acc", correct as f64 / ds.base.len() as f64);
    }
    Ok(curve)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Full-pass accuracy of an encoder+head pair on the base split.
pub fn base_accuracy(enc: &Encoder, head: &ClassifierHead, ds: &SplitDataset) -> Result<f64> {
    let label_map = base_label_map(ds);
    let mut correct = 0usize;
    for rec in &ds.base {
        let feat = encoder::encode(enc, &rec.image)?;
        let logits = head.w.value.matvec(&feat)?.add(&head.b.value)?;
        if argmax(logits.data()) == label_of(&label_map, rec.class_id)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.base.len() as f64)
}

// ---------------------------------------------------------------------------
// Stage two: episodic meta-training
// ---------------------------------------------------------------------------

/// Builds one episode's loss on the tape. Support images are encoded with
/// their own class-name embedding (unless the mechanism is disabled),
/// queries unprompted. Returns the loss id and the query hit count.
pub fn meta_episode_loss_fwd(
    tape: &mut Tape,
    enc_vars: &EncoderVars,
    prompt_vars: &PromptVars,
    episode: &Episode,
    table: &ClassEmbeddingTable,
    model: &ModelConfig,
    pcfg: &PromptConfig,
    temperature: f64,
) -> Result<(VarId, usize)> {
    let mut prototypes = Vec::with_capacity(episode.way);
    for (class_idx, name) in episode.class_names.iter().enumerate() {
        let mut feats = Vec::with_capacity(episode.shot);
        for rec in &episode.support[class_idx] {
            let patches = encoder::patchify(&rec.image, model.patch_size)?;
            let pid = tape.leaf(patches);
            let feat = if pcfg.mechanism == Mechanism::None {
                encoder::encode_fwd(tape, enc_vars, pid, model)
            } else {
                let g = table.get(name)?;
                let g_row = tape.leaf(g.reshape(vec![1, g.len()])?);
                crate::prompt::encode_with_prompt_fwd(
                    tape, enc_vars, prompt_vars, pid, g_row, model, pcfg,
                )
            };
            feats.push(feat);
        }
        let stacked = tape.vstack(&feats);
        let proto = tape.mean_rows(stacked);
        if tape.value(proto).norm() == 0.0 {
            return Err(Error::Numeric(format!("zero-norm prototype for {name:?}")));
        }
        prototypes.push(proto);
    }

    let mut query_ids = Vec::with_capacity(episode.query.len());
    let mut labels = Vec::with_capacity(episode.query.len());
    for (rec, label) in &episode.query {
        let patches = encoder::patchify(&rec.image, model.patch_size)?;
        let pid = tape.leaf(patches);
        let feat = encoder::encode_fwd(tape, enc_vars, pid, model);
        if tape.value(feat).norm() == 0.0 {
            return Err(Error::Numeric("zero-norm query feature".into()));
        }
        query_ids.push(feat);
        labels.push(*label);
    }

    // hit count from eager values
    let mut correct = 0usize;
    for (&q, &y) in query_ids.iter().zip(&labels) {
        let sims: Vec<f64> = prototypes
            .iter()
            .map(|&p| {
                let qv = tape.value(q);
                let pv = tape.value(p);
                qv.dot(pv).unwrap() / (qv.norm() * pv.norm())
            })
            .collect();
        if argmax(&sims) == y {
            correct += 1;
        }
    }

    let loss = meta_loss_fwd(tape, &query_ids, &prototypes, &labels, temperature);
    Ok((loss, correct))
}

/// Episodically fine-tunes encoder and prompt module on the base split with
/// separate learning rates. Returns per-epoch loss/accuracy (and validation
/// accuracy when `val_episodes_per_epoch > 0`).
pub fn meta_train(
    enc: &mut Encoder,
    pm: &mut PromptModule,
    ds: &SplitDataset,
    table: &ClassEmbeddingTable,
    cfg: &TrainConfig,
) -> Result<TrainCurve> {
    cfg.validate()?;
    pm.cfg.validate(enc.cfg.depth)?;
    if pm.cfg.mechanism != Mechanism::None {
        let base_names: Vec<String> = ds
            .classes(crate::data::Split::Base)
            .into_iter()
            .map(|(_, n)| n)
            .collect();
        table.cover(&base_names)?;
    }

    let mut enc_opt = Optimizer::new(
        cfg.optimizer,
        cfg.lr_encoder,
        cfg.weight_decay,
        &enc.parameters(),
    );
    let mut proj_opt = Optimizer::new(
        cfg.optimizer,
        cfg.lr_projectors,
        cfg.weight_decay,
        &pm.parameters(),
    );

    let mut curve = TrainCurve::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut total_queries = 0usize;
        for ep_idx in 0..cfg.episodes_per_epoch {
            let ep_seed = mix_seed(&[cfg.seed, 0x4d45_5441, epoch as u64, ep_idx as u64]);
            let episode = sample_episode(
                &ds.base,
                cfg.way,
                cfg.shot,
                cfg.queries_per_class,
                ep_seed,
            )?;
            let mut tape = Tape::new();
            let enc_vars = EncoderVars::bind(enc, &mut tape);
            let prompt_vars = PromptVars::bind(pm, &mut tape);
            let (loss, hits) = meta_episode_loss_fwd(
                &mut tape,
                &enc_vars,
                &prompt_vars,
                &episode,
                table,
                &enc.cfg,
                &pm.cfg,
                cfg.temperature,
            )?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("non-finite meta loss {loss_value}"),
                });
            }
            loss_sum += loss_value;
            correct += hits;
            total_queries += episode.query.len();

            let grads = tape.backward(loss);
            for (p, id) in enc.parameters_mut().into_iter().zip(enc_vars.flat_ids()) {
                if let Some(g) = grads.get(id) {
                    p.accumulate_grad(g);
                }
            }
            for (p, id) in pm.parameters_mut().into_iter().zip(prompt_vars.flat_ids()) {
                if let Some(g) = grads.get(id) {
                    p.accumulate_grad(g);
                }
            }
            enc_opt.step(&mut enc.parameters_mut());
            proj_opt.step(&mut pm.parameters_mut());
            enc.zero_grads();
            pm.zero_grads();
            step += 1;
        }
        curve.push(epoch, "train", "loss", loss_sum / cfg.episodes_per_epoch as f64);
        curve.push(epoch, "train", "acc", correct as f64 / total_queries as f64);
        if cfg.val_episodes_per_epoch > 0 {
            let report = crate::evaluation::evaluate(
                enc,
                Some((pm, table)),
                &ds.validation,
                cfg.way,
                cfg.shot,
                cfg.queries_per_class,
                cfg.val_episodes_per_epoch,
                crate::evaluation::Classifier::CosineNn,
                mix_seed(&[cfg.seed, 0x5641_4c, epoch as u64]),
            )?;
            curve.push(epoch, "val", "acc", report.mean_acc);
        }
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Toy-model gradient check
// ---------------------------------------------------------------------------

/// One checked scenario and its report.
#[derive(Debug, Clone)]
pub struct GradCheckScenario {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// All scenarios plus a merged, descending per-parameter error table.
#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub worst: f64,
    pub scenarios: Vec<GradCheckScenario>,
    /// `(scenario/parameter, worst error)` sorted by error, descending.
    pub merged: Vec<(String, f64)>,
}

impl GradCheckSummary {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst <= tol
    }
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        depth: 2,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        activation: crate::nn::Activation::GeluTanh,
        ln_eps: 1e-5,
        scale_exponent: 0.25,
    }
}

/// Central differences need activations of healthy magnitude: a model with
/// near-zero weights has gradients so small that the finite-difference
/// quotient is noise dominated at eps 1e-4. Position embeddings init at
/// std 0.02, so scale them up to keep the check well conditioned.
fn boost_weights(params: &mut [Parameter]) {
    for p in params.iter_mut() {
        if p.name == "pos" {
            for v in p.value.data_mut() {
                *v *= 5.0;
            }
        }
    }
}

/// Runs finite-difference gradient checks of every parameter of a small
/// model through the pre-training loss and through the episodic loss with
/// each prompt mechanism. `corrupt` injects an analytic-gradient fault into
/// the first scenario (negative-control hook).
pub fn toy_gradient_check(epsilon: f64, corrupt: bool) -> Result<GradCheckSummary> {
    let model = toy_model_config();
    let ds = crate::data::generate_synthetic_dataset(4, 4, model.image_size, model.patch_size, 777)?;
    let table = crate::embeddings::synth_embeddings(&ds.all_class_names(), 6, 77)?;

    let mut scenarios = Vec::new();

    // Eq-1 path: encoder + head through the supervised loss on 3 images.
    {
        let enc = Encoder::init(model.clone(), 5)?;
        let head_init = {
            let mut h = ClassifierHead::zeros(2, model.width);
            // nonzero head so logits are not symmetric
            for (i, v) in h.w.value.data_mut().iter_mut().enumerate() {
                *v = ((i as f64) * 0.37).sin() * 0.1;
            }
            h
        };
        let images: Vec<(Tensor, usize)> = vec![
            (ds.base[0].image.clone(), 0),
            (ds.base[1].image.clone(), 0),
            (ds.base[ds.base.len() - 1].image.clone(), 1),
        ];
        let mut params: Vec<Parameter> = enc.parameters().into_iter().cloned().collect();
        params.push(head_init.w.clone());
        params.push(head_init.b.clone());
        boost_weights(&mut params);
        let depth = model.depth;
        let model_c = model.clone();
        let f = move |tape: &mut Tape, ids: &[VarId]| -> Result<VarId> {
            let enc_count = ids.len() - 2;
            let enc_vars = EncoderVars::from_ids(depth, &ids[..enc_count]);
            let head_w = ids[enc_count];
            let head_b = ids[enc_count + 1];
            let mut feats = Vec::new();
            let mut labels = Vec::new();
            for (img, y) in &images {
                let patches = encoder::patchify(img, model_c.patch_size)?;
                let pid = tape.leaf(patches);
                feats.push(encoder::encode_fwd(tape, &enc_vars, pid, &model_c));
                labels.push(*y);
            }
            Ok(pretrain_loss_fwd(tape, &feats, &labels, head_w, head_b))
        };
        let report = run_scenario(&mut params, f, epsilon, corrupt)?;
        scenarios.push(GradCheckScenario {
            name: "pretrain_loss",
            report,
        });
    }

    // Eq-4 paths: encoder + prompt module through the episodic loss.
    for (name, mechanism) in [
        ("meta_loss_si", Mechanism::Si),
        ("meta_loss_ci", Mechanism::Ci),
        ("meta_loss_both", Mechanism::Both),
    ] {
        let enc = Encoder::init(model.clone(), 11)?;
        let pcfg = PromptConfig {
            inject_layer: 2,
            mechanism,
            projector_kind: ProjectorKind::Linear,
            pooling: crate::prompt::Pooling::All,
            semantic_dim: 6,
            ci_inner: crate::prompt::CiInner::Sigmoid,
        };
        let pm = PromptModule::init(pcfg.clone(), &model, 13)?;
        let episode = sample_episode(&ds.base, 2, 1, 1, 99)?;
        let mut params: Vec<Parameter> = enc.parameters().into_iter().cloned().collect();
        params.extend(pm.parameters().into_iter().cloned());
        boost_weights(&mut params);
        let depth = model.depth;
        let model_c = model.clone();
        let table_c = table.clone();
        let pcfg_c = pcfg.clone();
        let episode_c = episode.clone();
        let enc_param_count = enc.parameters().len();
        let f = move |tape: &mut Tape, ids: &[VarId]| -> Result<VarId> {
            let enc_vars = EncoderVars::from_ids(depth, &ids[..enc_param_count]);
            let prompt_vars = PromptVars::from_ids(pcfg_c.projector_kind, &ids[enc_param_count..]);
            let (loss, _) = meta_episode_loss_fwd(
                tape,
                &enc_vars,
                &prompt_vars,
                &episode_c,
                &table_c,
                &model_c,
                &pcfg_c,
                0.2,
            )?;
            Ok(loss)
        };
        let report = run_scenario(&mut params, f, epsilon, false)?;
        scenarios.push(GradCheckScenario { name, report });
    }

    let mut merged: Vec<(String, f64)> = scenarios
        .iter()
        .flat_map(|s| {
            s.report
                .per_param
                .iter()
                .map(move |(p, e)| (format!("{}/{}", s.name, p), *e))
        })
        .collect();
    merged.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let worst = scenarios
        .iter()
        .map(|s| s.report.worst)
        .fold(0.0f64, f64::max);
    Ok(GradCheckSummary {
        worst,
        scenarios,
        merged,
    })
}

fn run_scenario<F>(
    params: &mut [Parameter],
    f: F,
    epsilon: f64,
    corrupt: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut analytic = nn::analytic_gradients(params, &f)?;
    if corrupt {
        analytic[0].data_mut()[0] += 0.05;
    }
    nn::compare_gradients(params, &analytic, &f, epsilon)
}
