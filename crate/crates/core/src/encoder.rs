//! Patch-transformer feature extractor.
//!
//! Images are cut into non-overlapping `P x P` patches (row-major order),
//! each patch is linearly embedded and given a learned position embedding,
//! and the resulting token sequence runs through `L` pre-norm transformer
//! layers. The image feature is the mean of the final token sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, AttentionConfig, Parameter};
use crate::tensor::Tensor;

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square image side in pixels (H = W).
    pub image_size: usize,
    /// Input channels.
    pub channels: usize,
    /// Patch side in pixels; must divide `image_size`.
    pub patch_size: usize,
    /// Number of transformer layers.
    pub depth: usize,
    /// Token width `C_z`.
    pub width: usize,
    /// Attention heads; must divide `width`.
    pub heads: usize,
    /// MLP hidden width = `width * mlp_ratio`.
    pub mlp_ratio: usize,
    /// Nonlinearity inside encoder MLP blocks.
    pub activation: Activation,
    pub ln_eps: f64,
    /// Attention logits are divided by `head_dim^scale_exponent`.
    pub scale_exponent: f64,
}

impl ModelConfig {
    /// Small default configuration: 16x16x1 images, 4x4 patches, 4 layers,
    /// width 64, 4 heads.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            activation: Activation::GeluTanh,
            ln_eps: 1e-5,
            scale_exponent: nn::DEFAULT_SCALE_EXPONENT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.channels == 0 || self.patch_size == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide width {}",
                self.heads, self.width
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `M`.
    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Flattened patch length `P*P*C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.heads,
            head_dim: self.width / self.heads,
            scale_exponent: self.scale_exponent,
        }
    }

    /// Checks that `img` is a `(H, W, C)` tensor matching this config.
    pub fn check_image(&self, img: &Tensor) -> Result<()> {
        let want = [self.image_size, self.image_size, self.channels];
        if img.shape() != want {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match config {:?}",
                img.shape(),
                want
            )));
        }
        Ok(())
    }
}

/// Token sequence `(S, C_z)`, tracking whether a prompt token occupies row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub has_prompt: bool,
}

impl TokenSequence {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() == 0 {
            return Err(Error::Shape(format!(
                "token sequence must be (S, C_z) with S >= 1, got {:?}",
                tokens.shape()
            )));
        }
        Ok(TokenSequence {
            tokens,
            has_prompt: false,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Cuts a `(H, W, C)` image into flattened `P x P x C` patches, row-major
/// over the patch grid (left-to-right, top-to-bottom).
pub fn patchify(img: &Tensor, patch_size: usize) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::Shape(format!(
            "patchify expects (H, W, C), got {:?}",
            img.shape()
        )));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "patch size {patch_size} does not divide image {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut out = vec![0.0; gh * gw * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut k = 0;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for ch in 0..c {
                        let y = gy * patch_size + py;
                        let x = gx * patch_size + px;
                        out[row * dim + k] = img.data()[(y * w + x) * c + ch];
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::matrix(gh * gw, dim, out)
}

/// `Z_0 = patches * W_embed + pos`; output `(M, C_z)`.
pub fn embed_patches(patches: &Tensor, w_embed: &Tensor, pos: &Tensor) -> Result<Tensor> {
    if patches.rank() != 2 || w_embed.rank() != 2 || patches.cols() != w_embed.rows() {
        return Err(Error::Shape(format!(
            "embed_patches: patches {:?} vs w_embed {:?}",
            patches.shape(),
            w_embed.shape()
        )));
    }
    if pos.shape() != [patches.rows(), w_embed.cols()] {
        return Err(Error::Shape(format!(
            "position embedding {:?} must be ({}, {})",
            pos.shape(),
            patches.rows(),
            w_embed.cols()
        )));
    }
    patches.matmul(w_embed)?.add(pos)
}

/// Parameters of one pre-norm transformer layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1_gamma: Parameter,
    pub ln1_beta: Parameter,
    pub w_qkv: Parameter,
    pub w_out: Parameter,
    pub ln2_gamma: Parameter,
    pub ln2_beta: Parameter,
    pub mlp_w1: Parameter,
    pub mlp_b1: Parameter,
    pub mlp_w2: Parameter,
    pub mlp_b2: Parameter,
}

impl EncoderLayer {
    pub const PARAMS: usize = 10;

    fn zeros(cfg: &ModelConfig, idx: usize) -> Self {
        let w = cfg.width;
        let hidden = cfg.mlp_hidden();
        let p = |name: String, t: Tensor| Parameter::new(name, t);
        EncoderLayer {
            ln1_gamma: p(format!("layer{idx}.ln1.gamma"), Tensor::vector(vec![1.0; w])),
            ln1_beta: p(format!("layer{idx}.ln1.beta"), Tensor::zeros(&[w])),
            w_qkv: p(format!("layer{idx}.attn.w_qkv"), Tensor::zeros(&[w, 3 * w])),
            w_out: p(format!("layer{idx}.attn.w_out"), Tensor::zeros(&[w, w])),
            ln2_gamma: p(format!("layer{idx}.ln2.gamma"), Tensor::vector(vec![1.0; w])),
            ln2_beta: p(format!("layer{idx}.ln2.beta"), Tensor::zeros(&[w])),
            mlp_w1: p(format!("layer{idx}.mlp.w1"), Tensor::zeros(&[w, hidden])),
            mlp_b1: p(format!("layer{idx}.mlp.b1"), Tensor::zeros(&[hidden])),
            mlp_w2: p(format!("layer{idx}.mlp.w2"), Tensor::zeros(&[hidden, w])),
            mlp_b2: p(format!("layer{idx}.mlp.b2"), Tensor::zeros(&[w])),
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_qkv,
            &self.w_out,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_qkv,
            &mut self.w_out,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }
}

/// The full feature extractor.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: ModelConfig,
    pub embed: Parameter,
    pub pos: Parameter,
    pub layers: Vec<EncoderLayer>,
}

fn sample_normal(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("normal params");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("sampled shape")
}

/// Glorot-style std for a weight matrix.
fn xavier_std(shape: &[usize]) -> f64 {
    (2.0 / (shape[0] + shape[1]) as f64).sqrt()
}

const POS_INIT_STD: f64 = 0.02;

impl Encoder {
    /// Random initialization: Glorot-scaled weight matrices, position
    /// embeddings from N(0, 0.02), layer-norm affine at identity, biases
    /// at zero.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut enc = Encoder {
            embed: Parameter::new(
                "embed.w",
                Tensor::zeros(&[cfg.patch_dim(), cfg.width]),
            ),
            pos: Parameter::new("pos", Tensor::zeros(&[cfg.num_patches(), cfg.width])),
            layers: (0..cfg.depth).map(|i| EncoderLayer::zeros(&cfg, i)).collect(),
            cfg,
        };
        let xavier = |p: &mut Parameter, rng: &mut ChaCha12Rng| {
            p.value = sample_normal(rng, p.value.shape(), xavier_std(p.value.shape()));
        };
        xavier(&mut enc.embed, &mut rng);
        enc.pos.value = sample_normal(&mut rng, enc.pos.value.shape(), POS_INIT_STD);
        for layer in &mut enc.layers {
            xavier(&mut layer.w_qkv, &mut rng);
            xavier(&mut layer.w_out, &mut rng);
            xavier(&mut layer.mlp_w1, &mut rng);
            xavier(&mut layer.mlp_w2, &mut rng);
        }
        Ok(enc)
    }

    /// All-zero weights (layer norms at identity); mostly for tests.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder {
            embed: Parameter::new(
                "embed.w",
                Tensor::zeros(&[cfg.patch_dim(), cfg.width]),
            ),
            pos: Parameter::new("pos", Tensor::zeros(&[cfg.num_patches(), cfg.width])),
            layers: (0..cfg.depth).map(|i| EncoderLayer::zeros(&cfg, i)).collect(),
            cfg,
        })
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.embed, &self.pos];
        for layer in &self.layers {
            out.extend(layer.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.embed, &mut self.pos];
        for layer in &mut self.layers {
            out.extend(layer.parameters_mut());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub ln1_gamma: VarId,
    pub ln1_beta: VarId,
    pub w_qkv: VarId,
    pub w_out: VarId,
    pub ln2_gamma: VarId,
    pub ln2_beta: VarId,
    pub mlp_w1: VarId,
    pub mlp_b1: VarId,
    pub mlp_w2: VarId,
    pub mlp_b2: VarId,
}

/// Tape handles for every encoder parameter, in canonical order.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embed: VarId,
    pub pos: VarId,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    /// Inserts each parameter value as a tape leaf.
    pub fn bind(enc: &Encoder, tape: &mut Tape) -> Self {
        let ids: Vec<VarId> = enc
            .parameters()
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Self::from_ids(enc.cfg.depth, &ids)
    }

    /// Ids in [`Encoder::parameters`] order.
    pub fn flat_ids(&self) -> Vec<VarId> {
        let mut out = vec![self.embed, self.pos];
        for l in &self.layers {
            out.extend([
                l.ln1_gamma, l.ln1_beta, l.w_qkv, l.w_out, l.ln2_gamma, l.ln2_beta, l.mlp_w1,
                l.mlp_b1, l.mlp_w2, l.mlp_b2,
            ]);
        }
        out
    }

    /// Rebuilds the structured view from a flat id list laid out in the
    /// same order as [`Encoder::parameters`].
    pub fn from_ids(depth: usize, ids: &[VarId]) -> Self {
        assert_eq!(ids.len(), 2 + depth * EncoderLayer::PARAMS, "encoder id count");
        let layers = (0..depth)
            .map(|l| {
                let base = 2 + l * EncoderLayer::PARAMS;
                LayerVars {
                    ln1_gamma: ids[base],
                    ln1_beta: ids[base + 1],
                    w_qkv: ids[base + 2],
                    w_out: ids[base + 3],
                    ln2_gamma: ids[base + 4],
                    ln2_beta: ids[base + 5],
                    mlp_w1: ids[base + 6],
                    mlp_b1: ids[base + 7],
                    mlp_w2: ids[base + 8],
                    mlp_b2: ids[base + 9],
                }
            })
            .collect();
        EncoderVars {
            embed: ids[0],
            pos: ids[1],
            layers,
        }
    }
}

/// One pre-norm transformer layer on the tape:
/// `Z' = Z + MSA(LN(Z)); out = Z' + MLP(LN(Z'))`.
pub fn transformer_layer_fwd(
    tape: &mut Tape,
    z: VarId,
    layer: &LayerVars,
    cfg: &ModelConfig,
) -> VarId {
    let attn_cfg = cfg.attention();
    let normed = tape.layer_norm(z, layer.ln1_gamma, layer.ln1_beta, cfg.ln_eps);
    let attended = nn::msa_fwd(tape, normed, layer.w_qkv, layer.w_out, &attn_cfg);
    let z1 = tape.add(z, attended);
    let normed2 = tape.layer_norm(z1, layer.ln2_gamma, layer.ln2_beta, cfg.ln_eps);
    let mlp = nn::mlp_fwd(
        tape,
        normed2,
        layer.mlp_w1,
        layer.mlp_b1,
        layer.mlp_w2,
        layer.mlp_b2,
        cfg.activation,
        Activation::Linear,
    );
    tape.add(z1, mlp)
}

/// One transformer layer at value level.
pub fn transformer_layer(z: &TokenSequence, layer: &EncoderLayer, cfg: &ModelConfig) -> Result<Tensor> {
    if z.tokens.cols() != cfg.width {
        return Err(Error::Shape(format!(
            "token width {} does not match config width {}",
            z.tokens.cols(),
            cfg.width
        )));
    }
    let mut tape = Tape::new();
    let zv = tape.leaf(z.tokens.clone());
    let vars = bind_layer(&mut tape, layer);
    let out = transformer_layer_fwd(&mut tape, zv, &vars, cfg);
    Ok(tape.value(out).clone())
}

fn bind_layer(tape: &mut Tape, layer: &EncoderLayer) -> LayerVars {
    LayerVars {
        ln1_gamma: tape.leaf(layer.ln1_gamma.value.clone()),
        ln1_beta: tape.leaf(layer.ln1_beta.value.clone()),
        w_qkv: tape.leaf(layer.w_qkv.value.clone()),
        w_out: tape.leaf(layer.w_out.value.clone()),
        ln2_gamma: tape.leaf(layer.ln2_gamma.value.clone()),
        ln2_beta: tape.leaf(layer.ln2_beta.value.clone()),
        mlp_w1: tape.leaf(layer.mlp_w1.value.clone()),
        mlp_b1: tape.leaf(layer.mlp_b1.value.clone()),
        mlp_w2: tape.leaf(layer.mlp_w2.value.clone()),
        mlp_b2: tape.leaf(layer.mlp_b2.value.clone()),
    }
}

/// Embedding plus all transformer layers on the tape; returns the final
/// `(M, C_z)` sequence id.
pub fn encode_tokens_fwd(
    tape: &mut Tape,
    vars: &EncoderVars,
    patches: VarId,
    cfg: &ModelConfig,
) -> VarId {
    let embedded = tape.matmul(patches, vars.embed);
    let mut z = tape.add(embedded, vars.pos);
    for layer in &vars.layers {
        z = transformer_layer_fwd(tape, z, layer, cfg);
    }
    z
}

/// Full unprompted encode on the tape: mean over the final patch tokens.
pub fn encode_fwd(tape: &mut Tape, vars: &EncoderVars, patches: VarId, cfg: &ModelConfig) -> VarId {
    let z = encode_tokens_fwd(tape, vars, patches, cfg);
    tape.mean_rows(z)
}

/// Encodes one image to a `(C_z)` feature vector.
pub fn encode(enc: &Encoder, img: &Tensor) -> Result<Tensor> {
    enc.cfg.check_image(img)?;
    let patches = patchify(img, enc.cfg.patch_size)?;
    let mut tape = Tape::new();
    let pid = tape.leaf(patches);
    let vars = EncoderVars::bind(enc, &mut tape);
    let out = encode_fwd(&mut tape, &vars, pid, &enc.cfg);
    Ok(tape.value(out).clone())
}

/// Per-layer activation trace of an unprompted encode.
///
/// `sequences[0]` is the embedded input `Z_0`; `sequences[l]` is the output
/// of layer `l`. `feature` is the pooled output.
pub struct EncodeTrace {
    pub sequences: Vec<Tensor>,
    pub feature: Tensor,
}

pub fn encode_traced(enc: &Encoder, img: &Tensor) -> Result<EncodeTrace> {
    enc.cfg.check_image(img)?;
    let patches = patchify(img, enc.cfg.patch_size)?;
    let mut tape = Tape::new();
    let pid = tape.leaf(patches);
    let vars = EncoderVars::bind(enc, &mut tape);
    let embedded = tape.matmul(pid, vars.embed);
    let mut z = tape.add(embedded, vars.pos);
    let mut sequences = vec![tape.value(z).clone()];
    for layer in &vars.layers {
        z = transformer_layer_fwd(&mut tape, z, layer, &enc.cfg);
        sequences.push(tape.value(z).clone());
    }
    let pooled = tape.mean_rows(z);
    Ok(EncodeTrace {
        sequences,
        feature: tape.value(pooled).clone(),
    })
}
