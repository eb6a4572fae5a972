//! Differentiable building blocks: parameters, attention, normalization,
//! activations, and the finite-difference gradient oracle.
//!
//! Every block exists in two forms that share one kernel: a tape builder
//! (`*_fwd`) used inside training graphs, and a plain-value function that
//! validates its inputs, runs a throwaway tape and returns the result.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default attention scale exponent: logits are divided by `head_dim^0.25`.
pub const DEFAULT_SCALE_EXPONENT: f64 = 0.25;

/// Trainable tensor with an accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) {
        self.grad.add_assign(g);
    }
}

/// Multi-head attention geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub scale_exponent: f64,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, head_dim: usize) -> Self {
        AttentionConfig {
            num_heads,
            head_dim,
            scale_exponent: DEFAULT_SCALE_EXPONENT,
        }
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Logit divisor `head_dim^scale_exponent`.
    pub fn scale_divisor(&self) -> f64 {
        (self.head_dim as f64).powf(self.scale_exponent)
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "attention heads and head_dim must be positive".into(),
            ));
        }
        if self.width() != width {
            return Err(Error::Config(format!(
                "num_heads {} * head_dim {} != width {}",
                self.num_heads, self.head_dim, width
            )));
        }
        Ok(())
    }
}

/// Pointwise nonlinearities selectable per MLP layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    GeluTanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::GeluTanh => "gelu_tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "gelu_tanh" => Ok(Activation::GeluTanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn apply_activation(tape: &mut Tape, x: VarId, act: Activation) -> VarId {
    match act {
        Activation::Linear => x,
        Activation::GeluTanh => tape.gelu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Relu => tape.relu(x),
    }
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

/// Softmax along `axis` with max-subtraction; each slice sums to 1.
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    v.ensure_finite("softmax input")?;
    if axis >= v.rank().max(1) {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for shape {:?}",
            v.shape()
        )));
    }
    let mut tape = Tape::new();
    match v.rank() {
        1 => {
            let x = tape.leaf(v.reshape(vec![1, v.len()])?);
            let s = tape.softmax_rows(x);
            tape.value(s).reshape(vec![v.len()])
        }
        2 => {
            if axis == 1 {
                let x = tape.leaf(v.clone());
                let s = tape.softmax_rows(x);
                Ok(tape.value(s).clone())
            } else {
                let x = tape.leaf(v.transpose()?);
                let s = tape.softmax_rows(x);
                tape.value(s).transpose()
            }
        }
        r => Err(Error::Shape(format!("softmax supports rank <= 2, got {r}"))),
    }
}

/// Layer normalization over the last axis, then affine by `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
    if gamma.rank() != 1 || beta.rank() != 1 || gamma.len() != width || beta.len() != width {
        return Err(Error::Shape(format!(
            "layer_norm affine params must be vectors of length {width}"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be > 0".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(gamma.clone());
    let b = tape.leaf(beta.clone());
    let out = tape.layer_norm(xv, g, b, eps);
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

/// Weights for one self-attention block: `w_qkv` is `(C_z, 3*C_z)` with the
/// query, key and value projections laid out as contiguous column blocks;
/// `w_out` is `(C_z, C_z)`.
pub struct MsaParams<'a> {
    pub w_qkv: &'a Tensor,
    pub w_out: &'a Tensor,
}

/// Tape builder for multi-head self-attention over a `(S, C_z)` sequence.
pub fn msa_fwd(
    tape: &mut Tape,
    z: VarId,
    w_qkv: VarId,
    w_out: VarId,
    cfg: &AttentionConfig,
) -> VarId {
    let width = cfg.width();
    let qkv = tape.matmul(z, w_qkv); // (S, 3*C_z)
    let scale = 1.0 / cfg.scale_divisor();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let lo = h * cfg.head_dim;
        let hi = lo + cfg.head_dim;
        let q = tape.slice_cols(qkv, lo, hi);
        let k = tape.slice_cols(qkv, width + lo, width + hi);
        let v = tape.slice_cols(qkv, 2 * width + lo, 2 * width + hi);
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let scaled = tape.mul_scalar(logits, scale);
        let attn = tape.softmax_rows(scaled);
        heads.push(tape.matmul(attn, v));
    }
    let concat = tape.hstack(&heads);
    tape.matmul(concat, w_out)
}

/// Attention weights per head for a `(S, C_z)` sequence: `num_heads`
/// matrices of shape `(S, S)` whose rows sum to 1.
pub fn attention_maps(z: &Tensor, params: MsaParams<'_>, cfg: &AttentionConfig) -> Result<Vec<Tensor>> {
    validate_msa_inputs(z, &params, cfg)?;
    let width = cfg.width();
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let wq = tape.leaf(params.w_qkv.clone());
    let qkv = tape.matmul(zv, wq);
    let scale = 1.0 / cfg.scale_divisor();
    let mut maps = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let lo = h * cfg.head_dim;
        let hi = lo + cfg.head_dim;
        let q = tape.slice_cols(qkv, lo, hi);
        let k = tape.slice_cols(qkv, width + lo, width + hi);
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let scaled = tape.mul_scalar(logits, scale);
        let attn = tape.softmax_rows(scaled);
        maps.push(tape.value(attn).clone());
    }
    Ok(maps)
}

fn validate_msa_inputs(z: &Tensor, params: &MsaParams<'_>, cfg: &AttentionConfig) -> Result<()> {
    if z.rank() != 2 || z.rows() == 0 {
        return Err(Error::Shape(format!(
            "attention input must be (S, C_z) with S >= 1, got {:?}",
            z.shape()
        )));
    }
    let width = z.cols();
    cfg.validate(width)?;
    if params.w_qkv.shape() != [width, 3 * width] {
        return Err(Error::Shape(format!(
            "w_qkv must be ({width}, {}), got {:?}",
            3 * width,
            params.w_qkv.shape()
        )));
    }
    if params.w_out.shape() != [width, width] {
        return Err(Error::Shape(format!(
            "w_out must be ({width}, {width}), got {:?}",
            params.w_out.shape()
        )));
    }
    Ok(())
}

/// Multi-head self-attention over a `(S, C_z)` token sequence.
pub fn multihead_self_attention(
    z: &Tensor,
    params: MsaParams<'_>,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    validate_msa_inputs(z, &params, cfg)?;
    z.ensure_finite("attention input")?;
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let wq = tape.leaf(params.w_qkv.clone());
    let wo = tape.leaf(params.w_out.clone());
    let out = msa_fwd(&mut tape, zv, wq, wo, cfg);
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// Two-layer MLP
// ---------------------------------------------------------------------------

/// Weights of a two-layer MLP: `w1` is `(in, hidden)`, `w2` is `(hidden, out)`.
pub struct MlpParams<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

/// Tape builder: `act2(act1(x W1 + b1) W2 + b2)` for a `(m, in)` input.
pub fn mlp_fwd(
    tape: &mut Tape,
    x: VarId,
    w1: VarId,
    b1: VarId,
    w2: VarId,
    b2: VarId,
    act1: Activation,
    act2: Activation,
) -> VarId {
    let h = tape.matmul(x, w1);
    let h = tape.add_row_broadcast(h, b1);
    let h = apply_activation(tape, h, act1);
    let o = tape.matmul(h, w2);
    let o = tape.add_row_broadcast(o, b2);
    apply_activation(tape, o, act2)
}

/// Two-layer MLP on a vector or row-matrix input.
pub fn mlp_block(
    x: &Tensor,
    params: MlpParams<'_>,
    act1: Activation,
    act2: Activation,
) -> Result<Tensor> {
    let as_matrix = match x.rank() {
        1 => x.reshape(vec![1, x.len()])?,
        2 => x.clone(),
        r => return Err(Error::Shape(format!("mlp_block rank {r} input"))),
    };
    if params.w1.rank() != 2 || as_matrix.cols() != params.w1.rows() {
        return Err(Error::Shape(format!(
            "mlp_block: input width {} does not match w1 {:?}",
            as_matrix.cols(),
            params.w1.shape()
        )));
    }
    if params.w2.rank() != 2
        || params.w1.cols() != params.w2.rows()
        || params.b1.len() != params.w1.cols()
        || params.b2.len() != params.w2.cols()
    {
        return Err(Error::Shape("mlp_block: inconsistent layer shapes".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(as_matrix);
    let w1 = tape.leaf(params.w1.clone());
    let b1 = tape.leaf(params.b1.clone());
    let w2 = tape.leaf(params.w2.clone());
    let b2 = tape.leaf(params.b2.clone());
    let out = mlp_fwd(&mut tape, xv, w1, b1, w2, b2, act1, act2);
    let out = tape.value(out).clone();
    if x.rank() == 1 {
        out.reshape(vec![out.cols()])
    } else {
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

/// Cosine similarity of two nonzero vectors, in `[-1, 1]`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 1 || b.rank() != 1 || a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_similarity wants equal-length vectors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine_similarity on zero-norm vector".into()));
    }
    let c = a.dot(b)? / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Worst finite-difference mismatch per parameter, plus the global worst.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst: f64,
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst <= tol
    }
}

/// Scalar functions checked by [`check_gradients`] receive leaves bound from
/// the parameter list, in order, and build a rank-0 output on the tape.
pub type ScalarFn<'a> = dyn Fn(&mut Tape, &[VarId]) -> Result<VarId> + 'a;

fn run_scalar(params: &[Parameter], f: &ScalarFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check target must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Analytic gradients of `f` with respect to each parameter, via one
/// backward pass.
pub fn analytic_gradients(params: &[Parameter], f: &ScalarFn<'_>) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let root = f(&mut tape, &ids)?;
    if tape.value(root).len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check target must be scalar, got {:?}",
            tape.value(root).shape()
        )));
    }
    let grads = tape.backward(root);
    Ok(ids
        .iter()
        .zip(params)
        .map(|(id, p)| grads.dense(*id, p.value.shape()))
        .collect())
}

/// Relative error with an absolute fallback for near-zero gradients.
fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares precomputed analytic gradients against central differences.
pub fn compare_gradients(
    params: &mut [Parameter],
    analytic: &[Tensor],
    f: &ScalarFn<'_>,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut param_worst = 0.0f64;
        for k in 0..params[i].value.len() {
            let orig = params[i].value.data()[k];
            params[i].value.data_mut()[k] = orig + epsilon;
            let plus = run_scalar(params, f)?;
            params[i].value.data_mut()[k] = orig - epsilon;
            let minus = run_scalar(params, f)?;
            params[i].value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = grad_error(analytic[i].data()[k], numeric);
            param_worst = param_worst.max(err);
        }
        worst = worst.max(param_worst);
        per_param.push((params[i].name.clone(), param_worst));
    }
    Ok(GradCheckReport { worst, per_param })
}

/// Checks every entry of every parameter's analytic gradient against a
/// central finite difference of `f`, returning the worst mismatch.
pub fn check_gradients<F>(params: &mut [Parameter], f: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let analytic = analytic_gradients(params, &f)?;
    compare_gradients(params, &analytic, &f, epsilon)
}
