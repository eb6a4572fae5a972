//! Conditioning the encoder on class-name embeddings.
//!
//! Two mechanisms, applied at one injection layer:
//!
//! * spatial interaction: project the embedding to token width and prepend
//!   it to the patch sequence, so self-attention mixes it with patches;
//! * channel interaction: average the patch tokens into a context vector,
//!   concatenate it with the projected embedding, push the pair through a
//!   two-layer sigmoid MLP, and add the resulting gate vector to every
//!   patch token.
//!
//! With the mechanism disabled, prompted encoding is bit-for-bit identical
//! to the plain encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, VarId};
use crate::encoder::{self, Encoder, EncoderVars, ModelConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{Activation, Parameter};
use crate::tensor::Tensor;

/// Which interaction mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    None,
    Si,
    Ci,
    Both,
}

impl Mechanism {
    pub fn spatial(&self) -> bool {
        matches!(self, Mechanism::Si | Mechanism::Both)
    }

    pub fn channel(&self) -> bool {
        matches!(self, Mechanism::Ci | Mechanism::Both)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Si => "si",
            Mechanism::Ci => "ci",
            Mechanism::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Mechanism::None),
            "si" => Ok(Mechanism::Si),
            "ci" => Ok(Mechanism::Ci),
            "both" => Ok(Mechanism::Both),
            other => Err(Error::Config(format!("unknown mechanism {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorKind {
    Linear,
    Mlp,
}

impl ProjectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProjectorKind::Linear => "linear",
            ProjectorKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProjectorKind::Linear),
            "mlp" => Ok(ProjectorKind::Mlp),
            other => Err(Error::Config(format!("unknown projector {other:?}"))),
        }
    }
}

/// How the final token sequence is pooled into a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Output at the prompt position (requires spatial interaction).
    Head,
    /// Mean over patch positions only.
    Patches,
    /// Mean over the full output sequence, prompt position included.
    All,
}

impl Pooling {
    pub fn name(&self) -> &'static str {
        match self {
            Pooling::Head => "head",
            Pooling::Patches => "patches",
            Pooling::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Pooling::Head),
            "patches" => Ok(Pooling::Patches),
            "all" => Ok(Pooling::All),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

/// Inner activation of the channel-interaction MLP. The printed form uses
/// sigmoid at both layers; ReLU is available for comparison. The outer
/// activation is always sigmoid so the gate stays in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiInner {
    Sigmoid,
    Relu,
}

impl CiInner {
    pub fn name(&self) -> &'static str {
        match self {
            CiInner::Sigmoid => "sigmoid",
            CiInner::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(CiInner::Sigmoid),
            "relu" => Ok(CiInner::Relu),
            other => Err(Error::Config(format!("unknown ci activation {other:?}"))),
        }
    }

    fn activation(&self) -> Activation {
        match self {
            CiInner::Sigmoid => Activation::Sigmoid,
            CiInner::Relu => Activation::Relu,
        }
    }
}

/// Prompt-injection settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    /// 1-based transformer layer index at which prompts are applied.
    pub inject_layer: usize,
    pub mechanism: Mechanism,
    pub projector_kind: ProjectorKind,
    pub pooling: Pooling,
    /// Embedding dimension `D_g`.
    pub semantic_dim: usize,
    pub ci_inner: CiInner,
}

impl PromptConfig {
    /// Default injection layer for a given depth: within the final third,
    /// `ceil(2L/3) + 1` clamped to `[1, L]`.
    pub fn default_inject_layer(depth: usize) -> usize {
        if depth == 0 {
            return 1;
        }
        ((2 * depth).div_ceil(3) + 1).min(depth).max(1)
    }

    pub fn new(depth: usize, semantic_dim: usize) -> Self {
        PromptConfig {
            inject_layer: Self::default_inject_layer(depth),
            mechanism: Mechanism::Both,
            projector_kind: ProjectorKind::Linear,
            pooling: Pooling::All,
            semantic_dim,
            ci_inner: CiInner::Sigmoid,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.semantic_dim == 0 {
            return Err(Error::Config("semantic_dim must be positive".into()));
        }
        if self.mechanism != Mechanism::None {
            if depth == 0 {
                return Err(Error::Config(
                    "prompt injection requires at least one layer".into(),
                ));
            }
            if self.inject_layer < 1 || self.inject_layer > depth {
                return Err(Error::Config(format!(
                    "inject_layer {} outside [1, {depth}]",
                    self.inject_layer
                )));
            }
            if self.pooling == Pooling::Head && !self.mechanism.spatial() {
                return Err(Error::Config(
                    "head pooling needs the spatial mechanism (no prompt position otherwise)"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// Embedding-to-token-width projector, linear or two-layer MLP.
#[derive(Debug, Clone)]
pub enum Projector {
    Linear {
        w: Parameter,
        b: Parameter,
    },
    Mlp {
        w1: Parameter,
        b1: Parameter,
        w2: Parameter,
        b2: Parameter,
    },
}

impl Projector {
    fn init(
        kind: ProjectorKind,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut tensor = |shape: &[usize]| {
            let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("normal params");
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        };
        match kind {
            ProjectorKind::Linear => Projector::Linear {
                w: Parameter::new(format!("{prefix}.w"), tensor(&[in_dim, out_dim])),
                b: Parameter::new(format!("{prefix}.b"), Tensor::zeros(&[out_dim])),
            },
            ProjectorKind::Mlp => {
                // hidden width equals the output width
                Projector::Mlp {
                    w1: Parameter::new(format!("{prefix}.w1"), tensor(&[in_dim, out_dim])),
                    b1: Parameter::new(format!("{prefix}.b1"), Tensor::zeros(&[out_dim])),
                    w2: Parameter::new(format!("{prefix}.w2"), tensor(&[out_dim, out_dim])),
                    b2: Parameter::new(format!("{prefix}.b2"), Tensor::zeros(&[out_dim])),
                }
            }
        }
    }

    pub fn kind(&self) -> ProjectorKind {
        match self {
            Projector::Linear { .. } => ProjectorKind::Linear,
            Projector::Mlp { .. } => ProjectorKind::Mlp,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Projector::Linear { w, .. } => w.value.rows(),
            Projector::Mlp { w1, .. } => w1.value.rows(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Projector::Linear { w, .. } => w.value.cols(),
            Projector::Mlp { w2, .. } => w2.value.cols(),
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Projector::Linear { w, b } => vec![w, b],
            Projector::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Projector::Linear { w, b } => vec![w, b],
            Projector::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }
}

/// Tape handles for a projector's parameters.
#[derive(Debug, Clone, Copy)]
pub enum ProjectorVars {
    Linear {
        w: VarId,
        b: VarId,
    },
    Mlp {
        w1: VarId,
        b1: VarId,
        w2: VarId,
        b2: VarId,
    },
}

impl ProjectorVars {
    fn from_ids(kind: ProjectorKind, ids: &[VarId]) -> (Self, usize) {
        match kind {
            ProjectorKind::Linear => (
                ProjectorVars::Linear {
                    w: ids[0],
                    b: ids[1],
                },
                2,
            ),
            ProjectorKind::Mlp => (
                ProjectorVars::Mlp {
                    w1: ids[0],
                    b1: ids[1],
                    w2: ids[2],
                    b2: ids[3],
                },
                4,
            ),
        }
    }

    /// Projects a `(1, D_g)` row to a `(1, C_z)` row.
    pub fn project(&self, tape: &mut Tape, g_row: VarId) -> VarId {
        match self {
            ProjectorVars::Linear { w, b } => {
                let o = tape.matmul(g_row, *w);
                tape.add_row_broadcast(o, *b)
            }
            ProjectorVars::Mlp { w1, b1, w2, b2 } => {
                let h = tape.matmul(g_row, *w1);
                let h = tape.add_row_broadcast(h, *b1);
                let h = tape.gelu(h);
                let o = tape.matmul(h, *w2);
                tape.add_row_broadcast(o, *b2)
            }
        }
    }
}

/// Projectors and channel-interaction MLP.
#[derive(Debug, Clone)]
pub struct PromptModule {
    pub cfg: PromptConfig,
    /// Projector feeding the spatial prompt token.
    pub h_s: Projector,
    /// Projector feeding the channel-interaction MLP.
    pub h_c: Projector,
    pub ci_w1: Parameter,
    pub ci_b1: Parameter,
    pub ci_w2: Parameter,
    pub ci_b2: Parameter,
}

impl PromptModule {
    pub fn init(cfg: PromptConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate(model.depth)?;
        let width = model.width;
        let d_g = cfg.semantic_dim;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let h_s = Projector::init(cfg.projector_kind, "hs", d_g, width, &mut rng);
        let h_c = Projector::init(cfg.projector_kind, "hc", d_g, width, &mut rng);
        let mut tensor = |shape: &[usize]| {
            let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("normal params");
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        };
        // gate bias starts negative so the channel shift opens near zero
        // and grows only where training asks for it
        let gate_bias = Tensor::vector(vec![-2.0; width]);
        Ok(PromptModule {
            cfg,
            h_s,
            h_c,
            ci_w1: Parameter::new("ci.w1", tensor(&[2 * width, width])),
            ci_b1: Parameter::new("ci.b1", Tensor::zeros(&[width])),
            ci_w2: Parameter::new("ci.w2", tensor(&[width, width])),
            ci_b2: Parameter::new("ci.b2", gate_bias),
        })
    }

    /// All-zero weights; gates sit at 0.5 and prompt tokens at zero.
    pub fn zeros(cfg: PromptConfig, model: &ModelConfig) -> Result<Self> {
        let mut pm = Self::init(cfg, model, 0)?;
        for p in pm.parameters_mut() {
            p.value.fill(0.0);
        }
        Ok(pm)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.h_s.parameters();
        out.extend(self.h_c.parameters());
        out.push(&self.ci_w1);
        out.push(&self.ci_b1);
        out.push(&self.ci_w2);
        out.push(&self.ci_b2);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.h_s.parameters_mut();
        out.extend(self.h_c.parameters_mut());
        out.push(&mut self.ci_w1);
        out.push(&mut self.ci_b1);
        out.push(&mut self.ci_w2);
        out.push(&mut self.ci_b2);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn check_embedding(&self, g: &Tensor) -> Result<()> {
        if g.rank() != 1 || g.len() != self.cfg.semantic_dim {
            return Err(Error::Shape(format!(
                "semantic embedding shape {:?}, want ({})",
                g.shape(),
                self.cfg.semantic_dim
            )));
        }
        g.ensure_finite("semantic embedding")
    }
}

/// Tape handles for every prompt parameter, in canonical order.
#[derive(Debug, Clone, Copy)]
pub struct PromptVars {
    pub h_s: ProjectorVars,
    pub h_c: ProjectorVars,
    pub ci_w1: VarId,
    pub ci_b1: VarId,
    pub ci_w2: VarId,
    pub ci_b2: VarId,
}

impl PromptVars {
    pub fn bind(pm: &PromptModule, tape: &mut Tape) -> Self {
        let ids: Vec<VarId> = pm
            .parameters()
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Self::from_ids(pm.cfg.projector_kind, &ids)
    }

    /// Rebuilds the structured view from ids laid out in the same order as
    /// [`PromptModule::parameters`].
    pub fn from_ids(kind: ProjectorKind, ids: &[VarId]) -> Self {
        let (h_s, used_s) = ProjectorVars::from_ids(kind, ids);
        let (h_c, used_c) = ProjectorVars::from_ids(kind, &ids[used_s..]);
        let base = used_s + used_c;
        assert_eq!(ids.len(), base + 4, "prompt id count");
        PromptVars {
            h_s,
            h_c,
            ci_w1: ids[base],
            ci_b1: ids[base + 1],
            ci_w2: ids[base + 2],
            ci_b2: ids[base + 3],
        }
    }

    pub fn id_count(kind: ProjectorKind) -> usize {
        match kind {
            ProjectorKind::Linear => 2 * 2 + 4,
            ProjectorKind::Mlp => 2 * 4 + 4,
        }
    }

    /// Ids in [`PromptModule::parameters`] order.
    pub fn flat_ids(&self) -> Vec<VarId> {
        let proj = |p: &ProjectorVars| match *p {
            ProjectorVars::Linear { w, b } => vec![w, b],
            ProjectorVars::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        };
        let mut out = proj(&self.h_s);
        out.extend(proj(&self.h_c));
        out.extend([self.ci_w1, self.ci_b1, self.ci_w2, self.ci_b2]);
        out
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Projects a semantic embedding to the spatial prompt token `(C_z)`.
pub fn project_spatial(g_y: &Tensor, pm: &PromptModule) -> Result<Tensor> {
    pm.check_embedding(g_y)?;
    let mut tape = Tape::new();
    let g_row = tape.leaf(g_y.reshape(vec![1, g_y.len()])?);
    let vars = PromptVars::bind(pm, &mut tape);
    let row = vars.h_s.project(&mut tape, g_row);
    tape.value(row).reshape(vec![pm.h_s.out_dim()])
}

/// Prepends the prompt token: rows become `[z0, z_1, ..., z_M]`.
pub fn extend_sequence(z: &TokenSequence, z0: &Tensor) -> Result<TokenSequence> {
    if z.has_prompt {
        return Err(Error::State(
            "sequence already carries a prompt token".into(),
        ));
    }
    if z0.rank() != 1 || z0.len() != z.tokens.cols() {
        return Err(Error::Shape(format!(
            "prompt token shape {:?}, want ({})",
            z0.shape(),
            z.tokens.cols()
        )));
    }
    let mut data = Vec::with_capacity((z.len() + 1) * z.tokens.cols());
    data.extend_from_slice(z0.data());
    data.extend_from_slice(z.tokens.data());
    Ok(TokenSequence {
        tokens: Tensor::matrix(z.len() + 1, z.tokens.cols(), data)?,
        has_prompt: true,
    })
}

/// Mean of all patch tokens (the visual context vector).
pub fn token_context(z: &TokenSequence) -> Result<Tensor> {
    if z.has_prompt {
        return Err(Error::State(
            "context is defined over patch tokens only".into(),
        ));
    }
    let mut tape = Tape::new();
    let zv = tape.leaf(z.tokens.clone());
    let m = tape.mean_rows(zv);
    Ok(tape.value(m).clone())
}

/// Channel interaction on the tape. `z` is the prompt-free `(M, C_z)`
/// sequence, `g_row` the `(1, D_g)` embedding. Returns the gated sequence.
pub fn channel_modulate_fwd(
    tape: &mut Tape,
    z: VarId,
    g_row: VarId,
    vars: &PromptVars,
    ci_inner: CiInner,
) -> VarId {
    let context = tape.mean_rows(z);
    let proj_row = vars.h_c.project(tape, g_row);
    let proj = tape.row_to_vec(proj_row);
    let joined = tape.hstack(&[proj, context]);
    let joined_row = tape.vec_to_row(joined);
    let h = tape.matmul(joined_row, vars.ci_w1);
    let h = tape.add_row_broadcast(h, vars.ci_b1);
    let h = crate::nn::apply_activation(tape, h, ci_inner.activation());
    let o = tape.matmul(h, vars.ci_w2);
    let o = tape.add_row_broadcast(o, vars.ci_b2);
    let beta_row = tape.sigmoid(o);
    let beta = tape.row_to_vec(beta_row);
    tape.add_row_broadcast(z, beta)
}

/// Channel interaction at value level: adds the gate vector to every token.
pub fn channel_modulate(
    z: &TokenSequence,
    g_y: &Tensor,
    pm: &PromptModule,
) -> Result<TokenSequence> {
    if z.has_prompt {
        return Err(Error::State(
            "channel interaction applies to prompt-free sequences".into(),
        ));
    }
    pm.check_embedding(g_y)?;
    if z.tokens.cols() != pm.h_c.out_dim() {
        return Err(Error::Shape(format!(
            "token width {} does not match projector output {}",
            z.tokens.cols(),
            pm.h_c.out_dim()
        )));
    }
    let mut tape = Tape::new();
    let zv = tape.leaf(z.tokens.clone());
    let g_row = tape.leaf(g_y.reshape(vec![1, g_y.len()])?);
    let vars = PromptVars::bind(pm, &mut tape);
    let out = channel_modulate_fwd(&mut tape, zv, g_row, &vars, pm.cfg.ci_inner);
    Ok(TokenSequence {
        tokens: tape.value(out).clone(),
        has_prompt: false,
    })
}

/// The gate vector alone: the per-channel shift applied to every token.
pub fn channel_gate(z: &TokenSequence, g_y: &Tensor, pm: &PromptModule) -> Result<Tensor> {
    let modulated = channel_modulate(z, g_y, pm)?;
    let diff = modulated.tokens.sub(&z.tokens)?;
    Ok(Tensor::vector(diff.row(0).to_vec()))
}

/// Prompted encode on the tape. Layers before the injection layer run
/// unprompted; at the injection layer the channel gate is applied first and
/// the spatial token prepended second; remaining layers run on the extended
/// sequence. Returns the pooled feature id.
pub fn encode_with_prompt_fwd(
    tape: &mut Tape,
    enc_vars: &EncoderVars,
    prompt_vars: &PromptVars,
    patches: VarId,
    g_row: VarId,
    model: &ModelConfig,
    pcfg: &PromptConfig,
) -> VarId {
    debug_assert!(pcfg.mechanism != Mechanism::None, "delegate mechanism none");
    let embedded = tape.matmul(patches, enc_vars.embed);
    let mut z = tape.add(embedded, enc_vars.pos);
    let mut extended = false;
    for (i, layer) in enc_vars.layers.iter().enumerate() {
        if i + 1 == pcfg.inject_layer {
            if pcfg.mechanism.channel() {
                z = channel_modulate_fwd(tape, z, g_row, prompt_vars, pcfg.ci_inner);
            }
            if pcfg.mechanism.spatial() {
                let z0 = prompt_vars.h_s.project(tape, g_row);
                z = tape.vstack(&[z0, z]);
                extended = true;
            }
        }
        z = encoder::transformer_layer_fwd(tape, z, layer, model);
    }
    pool_fwd(tape, z, extended, pcfg.pooling)
}

fn pool_fwd(tape: &mut Tape, z: VarId, extended: bool, pooling: Pooling) -> VarId {
    let rows = tape.value(z).rows();
    match pooling {
        Pooling::All => tape.mean_rows(z),
        Pooling::Patches => {
            if extended {
                let patches = tape.slice_rows(z, 1, rows);
                tape.mean_rows(patches)
            } else {
                tape.mean_rows(z)
            }
        }
        Pooling::Head => {
            assert!(extended, "head pooling requires a prompt token");
            let head = tape.slice_rows(z, 0, 1);
            tape.row_to_vec(head)
        }
    }
}

/// Conditional feature extraction `f(x | g)`.
///
/// With `Mechanism::None` this is exactly [`encoder::encode`], bit for bit.
pub fn encode_with_prompt(
    enc: &Encoder,
    pm: &PromptModule,
    img: &Tensor,
    g_y: &Tensor,
) -> Result<Tensor> {
    if pm.cfg.mechanism == Mechanism::None {
        return encoder::encode(enc, img);
    }
    pm.cfg.validate(enc.cfg.depth)?;
    pm.check_embedding(g_y)?;
    enc.cfg.check_image(img)?;
    let patches = encoder::patchify(img, enc.cfg.patch_size)?;
    let mut tape = Tape::new();
    let pid = tape.leaf(patches);
    let g_row = tape.leaf(g_y.reshape(vec![1, g_y.len()])?);
    let enc_vars = EncoderVars::bind(enc, &mut tape);
    let prompt_vars = PromptVars::bind(pm, &mut tape);
    let out = encode_with_prompt_fwd(&mut tape, &enc_vars, &prompt_vars, pid, g_row, &enc.cfg, &pm.cfg);
    Ok(tape.value(out).clone())
}

/// Prompted encode that also returns per-layer activations and the final
/// token sequence (used by attention dumps and layer-trace tests).
pub struct PromptTrace {
    /// `sequences[0]` is `Z_0`; `sequences[l]` is the output of layer `l`.
    /// From the injection layer onward rows include the prompt position when
    /// the spatial mechanism is active.
    pub sequences: Vec<Tensor>,
    pub feature: Tensor,
    pub extended: bool,
}

pub fn encode_with_prompt_traced(
    enc: &Encoder,
    pm: &PromptModule,
    img: &Tensor,
    g_y: &Tensor,
) -> Result<PromptTrace> {
    if pm.cfg.mechanism == Mechanism::None {
        let trace = encoder::encode_traced(enc, img)?;
        return Ok(PromptTrace {
            sequences: trace.sequences,
            feature: trace.feature,
            extended: false,
        });
    }
    pm.cfg.validate(enc.cfg.depth)?;
    pm.check_embedding(g_y)?;
    enc.cfg.check_image(img)?;
    let patches = encoder::patchify(img, enc.cfg.patch_size)?;
    let mut tape = Tape::new();
    let pid = tape.leaf(patches);
    let g_row = tape.leaf(g_y.reshape(vec![1, g_y.len()])?);
    let enc_vars = EncoderVars::bind(enc, &mut tape);
    let prompt_vars = PromptVars::bind(pm, &mut tape);

    let embedded = tape.matmul(pid, enc_vars.embed);
    let mut z = tape.add(embedded, enc_vars.pos);
    let mut sequences = vec![tape.value(z).clone()];
    let mut extended = false;
    for (i, layer) in enc_vars.layers.iter().enumerate() {
        if i + 1 == pm.cfg.inject_layer {
            if pm.cfg.mechanism.channel() {
                z = channel_modulate_fwd(&mut tape, z, g_row, &prompt_vars, pm.cfg.ci_inner);
            }
            if pm.cfg.mechanism.spatial() {
                let z0 = prompt_vars.h_s.project(&mut tape, g_row);
                z = tape.vstack(&[z0, z]);
                extended = true;
            }
        }
        z = encoder::transformer_layer_fwd(&mut tape, z, layer, &enc.cfg);
        sequences.push(tape.value(z).clone());
    }
    let pooled = pool_fwd(&mut tape, z, extended, pm.cfg.pooling);
    Ok(PromptTrace {
        sequences,
        feature: tape.value(pooled).clone(),
        extended,
    })
}
