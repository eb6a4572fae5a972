//! Independent step-by-step reference implementations used as oracles.
//!
//! Everything here is written with plain loops straight from the defining
//! equations, deliberately sharing no code with the library's tape-based
//! path.

#![allow(dead_code)]

pub fn oracle_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn oracle_layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gamma[i] + beta[i])
        .collect()
}

/// Multi-head self-attention evaluated step by step: project to q/k/v,
/// per-head scaled dot-product attention with softmax over positions,
/// concatenate heads, project out.
pub fn oracle_msa(
    z: &[Vec<f64>],       // S rows of width C_z
    w_qkv: &[Vec<f64>],   // C_z rows of width 3*C_z
    w_out: &[Vec<f64>],   // C_z rows of width C_z
    heads: usize,
    scale_exponent: f64,
) -> Vec<Vec<f64>> {
    let s = z.len();
    let width = z[0].len();
    let head_dim = width / heads;
    // qkv = z * w_qkv
    let mut qkv = vec![vec![0.0; 3 * width]; s];
    for i in 0..s {
        for j in 0..3 * width {
            for k in 0..width {
                qkv[i][j] += z[i][k] * w_qkv[k][j];
            }
        }
    }
    let scale = 1.0 / (head_dim as f64).powf(scale_exponent);
    let mut concat = vec![vec![0.0; width]; s];
    for h in 0..heads {
        let (qo, ko, vo) = (h * head_dim, width + h * head_dim, 2 * width + h * head_dim);
        for i in 0..s {
            // logits over positions
            let mut logits = vec![0.0; s];
            for j in 0..s {
                for d in 0..head_dim {
                    logits[j] += qkv[i][qo + d] * qkv[j][ko + d];
                }
                logits[j] *= scale;
            }
            let attn = oracle_softmax(&logits);
            for d in 0..head_dim {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += attn[j] * qkv[j][vo + d];
                }
                concat[i][h * head_dim + d] = acc;
            }
        }
    }
    let mut out = vec![vec![0.0; width]; s];
    for i in 0..s {
        for j in 0..width {
            for k in 0..width {
                out[i][j] += concat[i][k] * w_out[k][j];
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel interaction evaluated step by step: context mean, projector,
/// concatenation, two sigmoid layers, additive gate.
#[allow(clippy::too_many_arguments)]
pub fn oracle_channel_modulate(
    tokens: &[Vec<f64>],
    g: &[f64],
    hc_w: &[Vec<f64>], // D_g rows of width C_z
    hc_b: &[f64],
    ci_w1: &[Vec<f64>], // 2*C_z rows of width H
    ci_b1: &[f64],
    ci_w2: &[Vec<f64>], // H rows of width C_z
    ci_b2: &[f64],
) -> Vec<Vec<f64>> {
    let m = tokens.len();
    let width = tokens[0].len();
    let mut context = vec![0.0; width];
    for row in tokens {
        for (c, v) in row.iter().enumerate() {
            context[c] += v / m as f64;
        }
    }
    let mut proj = hc_b.to_vec();
    for (i, gi) in g.iter().enumerate() {
        for (j, p) in proj.iter_mut().enumerate() {
            *p += gi * hc_w[i][j];
        }
    }
    let joined: Vec<f64> = proj.iter().chain(context.iter()).cloned().collect();
    let hidden_dim = ci_b1.len();
    let mut hidden = vec![0.0; hidden_dim];
    for j in 0..hidden_dim {
        let mut acc = ci_b1[j];
        for (i, v) in joined.iter().enumerate() {
            acc += v * ci_w1[i][j];
        }
        hidden[j] = sigmoid(acc);
    }
    let mut beta = vec![0.0; width];
    for j in 0..width {
        let mut acc = ci_b2[j];
        for (i, h) in hidden.iter().enumerate() {
            acc += h * ci_w2[i][j];
        }
        beta[j] = sigmoid(acc);
    }
    tokens
        .iter()
        .map(|row| row.iter().zip(&beta).map(|(v, b)| v + b).collect())
        .collect()
}

pub fn oracle_prototypes(groups: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    groups
        .iter()
        .map(|feats| {
            let dim = feats[0].len();
            let mut mean = vec![0.0; dim];
            for f in feats {
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= feats.len() as f64;
            }
            mean
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Episodic loss evaluated directly: cross entropy over cosine/temperature
/// logits, averaged over queries.
pub fn oracle_meta_loss(
    queries: &[Vec<f64>],
    prototypes: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
) -> f64 {
    let mut total = 0.0;
    for (q, &y) in queries.iter().zip(labels) {
        let logits: Vec<f64> = prototypes.iter().map(|p| cosine(q, p) / tau).collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        total += -(logits[y].exp() / denom).ln();
    }
    total / queries.len() as f64
}

/// Supervised loss evaluated directly: mean `-log softmax(W f + b)[y]`.
pub fn oracle_pretrain_loss(
    features: &[Vec<f64>],
    labels: &[usize],
    w: &[Vec<f64>], // num_classes rows of width dim
    b: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        let logits: Vec<f64> = w
            .iter()
            .zip(b)
            .map(|(row, bias)| row.iter().zip(f).map(|(wi, fi)| wi * fi).sum::<f64>() + bias)
            .collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        total += -(logits[y].exp() / denom).ln();
    }
    total / features.len() as f64
}

/// Deterministic pseudo-random values for oracle instances.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next_f64(&mut self) -> f64 {
        // xorshift into (-1, 1)
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }

    pub fn mat(&mut self, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows).map(|_| self.vec(cols)).collect()
    }
}
