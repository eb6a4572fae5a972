//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Forward values are computed eagerly as nodes are pushed, so a tape doubles
//! as a plain calculator when no backward pass is requested. `backward` walks
//! the tape once in reverse and accumulates gradients for every node that
//! influences the scalar root.
//!
//! Shape agreement between operands is an internal invariant of the callers
//! in this crate; violations panic rather than returning errors. Public
//! entry points validate shapes before touching the tape.

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    /// `(r,c) + (c)` broadcast over rows.
    AddRowBroadcast(VarId, VarId),
    MulScalar(VarId, f64),
    MatMul(VarId, VarId),
    /// `(m,n) . (n) -> (m)`.
    MatVec(VarId, VarId),
    Transpose(VarId),
    /// Softmax along the last axis of a matrix, row by row.
    SoftmaxRows(VarId),
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    },
    Gelu(VarId),
    Sigmoid(VarId),
    Relu(VarId),
    /// `(m,n) -> (n)` column means.
    MeanRows(VarId),
    /// `(n) -> ()` mean of a vector.
    MeanVec(VarId),
    /// Stack inputs as rows; rank-1 inputs count as single rows.
    VStack(Vec<VarId>),
    /// Concatenate along the last axis (vectors or equal-height matrices).
    HStack(Vec<VarId>),
    /// Collect scalars into a vector.
    StackScalars(Vec<VarId>),
    SliceRows {
        a: VarId,
        start: usize,
        end: usize,
    },
    SliceCols {
        a: VarId,
        start: usize,
        end: usize,
    },
    Reshape(VarId),
    LogSumExp(VarId),
    IndexScalar {
        a: VarId,
        index: usize,
    },
    Dot(VarId, VarId),
    /// Cosine similarity of two vectors; requires nonzero norms.
    Cosine(VarId, VarId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows_value(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            out[i * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[i * n + j] /= sum;
        }
    }
    Tensor::matrix(m, n, out).expect("softmax shape")
}

fn layer_norm_value(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (rows, n) = ln_rows(x);
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let xs = &x.data()[r * n..(r + 1) * n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            out[r * n + j] = (xs[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("layer_norm shape")
}

/// Treats a rank-1 tensor as a single row for per-row normalization.
fn ln_rows(x: &Tensor) -> (usize, usize) {
    match x.rank() {
        1 => (1, x.len()),
        2 => (x.rows(), x.cols()),
        r => panic!("layer_norm expects rank 1 or 2, got {r}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).add(self.value(b)).expect("add shapes");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).sub(self.value(b)).expect("sub shapes");
        self.push(v, Op::Sub(a, b))
    }

    /// `(r,c) + (c)`: adds `v` to every row of `m`.
    pub fn add_row_broadcast(&mut self, m: VarId, v: VarId) -> VarId {
        let mv = self.value(m);
        let vv = self.value(v);
        assert_eq!(mv.rank(), 2, "add_row_broadcast matrix rank");
        assert_eq!(mv.cols(), vv.len(), "add_row_broadcast widths");
        let (rows, cols) = (mv.rows(), mv.cols());
        let mut out = mv.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += vv.data()[c];
            }
        }
        let t = Tensor::matrix(rows, cols, out).expect("broadcast shape");
        self.push(t, Op::AddRowBroadcast(m, v))
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).scale(c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matvec(&mut self, a: VarId, x: VarId) -> VarId {
        let v = self.value(a).matvec(self.value(x)).expect("matvec shapes");
        self.push(v, Op::MatVec(a, x))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.value(a).transpose().expect("transpose rank");
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let v = softmax_rows_value(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let v = layer_norm_value(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(v, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let av = self.value(a);
        assert_eq!(av.rank(), 2, "mean_rows rank");
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += av.data()[r * n + c];
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        self.push(Tensor::vector(out), Op::MeanRows(a))
    }

    pub fn mean_vec(&mut self, a: VarId) -> VarId {
        let av = self.value(a);
        assert_eq!(av.rank(), 1, "mean_vec rank");
        let m = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanVec(a))
    }

    pub fn vstack(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "vstack of nothing");
        let cols = match self.value(parts[0]).rank() {
            1 => self.value(parts[0]).len(),
            2 => self.value(parts[0]).cols(),
            r => panic!("vstack rank {r}"),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            match v.rank() {
                1 => {
                    assert_eq!(v.len(), cols, "vstack widths");
                    rows += 1;
                }
                2 => {
                    assert_eq!(v.cols(), cols, "vstack widths");
                    rows += v.rows();
                }
                r => panic!("vstack rank {r}"),
            }
            data.extend_from_slice(v.data());
        }
        let t = Tensor::matrix(rows, cols, data).expect("vstack shape");
        self.push(t, Op::VStack(parts.to_vec()))
    }

    pub fn hstack(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "hstack of nothing");
        let rank = self.value(parts[0]).rank();
        let t = match rank {
            1 => {
                let mut data = Vec::new();
                for &p in parts {
                    assert_eq!(self.value(p).rank(), 1, "hstack mixed ranks");
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::vector(data)
            }
            2 => {
                let rows = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut data = vec![0.0; rows * total];
                let mut off = 0;
                for &p in parts {
                    let v = self.value(p);
                    assert_eq!(v.rows(), rows, "hstack heights");
                    let c = v.cols();
                    for r in 0..rows {
                        data[r * total + off..r * total + off + c]
                            .copy_from_slice(&v.data()[r * c..(r + 1) * c]);
                    }
                    off += c;
                }
                Tensor::matrix(rows, total, data).expect("hstack shape")
            }
            r => panic!("hstack rank {r}"),
        };
        self.push(t, Op::HStack(parts.to_vec()))
    }

    pub fn stack_scalars(&mut self, parts: &[VarId]) -> VarId {
        let data: Vec<f64> = parts.iter().map(|&p| self.value(p).item()).collect();
        self.push(Tensor::vector(data), Op::StackScalars(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let av = self.value(a);
        assert_eq!(av.rank(), 2, "slice_rows rank");
        assert!(start < end && end <= av.rows(), "slice_rows bounds");
        let n = av.cols();
        let data = av.data()[start * n..end * n].to_vec();
        let t = Tensor::matrix(end - start, n, data).expect("slice shape");
        self.push(t, Op::SliceRows { a, start, end })
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let av = self.value(a);
        assert_eq!(av.rank(), 2, "slice_cols rank");
        assert!(start < end && end <= av.cols(), "slice_cols bounds");
        let (m, n) = (av.rows(), av.cols());
        let w = end - start;
        let mut data = vec![0.0; m * w];
        for r in 0..m {
            data[r * w..(r + 1) * w].copy_from_slice(&av.data()[r * n + start..r * n + end]);
        }
        let t = Tensor::matrix(m, w, data).expect("slice shape");
        self.push(t, Op::SliceCols { a, start, end })
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let v = self.value(a).reshape(shape).expect("reshape count");
        self.push(v, Op::Reshape(a))
    }

    /// Convenience: `(1,n)` row to `(n)` vector.
    pub fn row_to_vec(&mut self, a: VarId) -> VarId {
        let n = self.value(a).cols();
        self.reshape(a, vec![n])
    }

    /// Convenience: `(n)` vector to `(1,n)` row.
    pub fn vec_to_row(&mut self, a: VarId) -> VarId {
        let n = self.value(a).len();
        self.reshape(a, vec![1, n])
    }

    pub fn logsumexp(&mut self, a: VarId) -> VarId {
        let av = self.value(a);
        assert_eq!(av.rank(), 1, "logsumexp rank");
        let max = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = av.data().iter().map(|v| (v - max).exp()).sum();
        self.push(Tensor::scalar(max + s.ln()), Op::LogSumExp(a))
    }

    pub fn index_scalar(&mut self, a: VarId, index: usize) -> VarId {
        let av = self.value(a);
        assert_eq!(av.rank(), 1, "index_scalar rank");
        assert!(index < av.len(), "index_scalar bounds");
        let v = av.data()[index];
        self.push(Tensor::scalar(v), Op::IndexScalar { a, index })
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).dot(self.value(b)).expect("dot shapes");
        self.push(Tensor::scalar(v), Op::Dot(a, b))
    }

    pub fn cosine(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.value(a);
        let bv = self.value(b);
        let (na, nb) = (av.norm(), bv.norm());
        assert!(na > 0.0 && nb > 0.0, "cosine of zero-norm vector");
        let v = av.dot(bv).expect("cosine shapes") / (na * nb);
        self.push(Tensor::scalar(v), Op::Cosine(a, b))
    }

    /// Gradients of the scalar at `root` with respect to every node.
    ///
    /// Panics if `root` is not a scalar. Nodes that do not influence the
    /// root report no gradient (equal to zero).
    pub fn backward(&self, root: VarId) -> Grads {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            self.value(root).shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            // parents always precede children, so slot i is final here
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRowBroadcast(m, v) => {
                    let (rows, cols) = (g.rows(), g.cols());
                    let mut gv = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gv[c] += g.data()[r * cols + c];
                        }
                    }
                    accumulate(&mut grads, *v, Tensor::vector(gv));
                    accumulate(&mut grads, *m, g);
                }
                Op::MulScalar(a, c) => {
                    accumulate(&mut grads, *a, g.scale(*c));
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b)).unwrap();
                    let gb = self.value(*a).matmul_tn(&g).unwrap();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatVec(a, x) => {
                    let xv = self.value(*x);
                    let av = self.value(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] = g.data()[r] * xv.data()[c];
                        }
                    }
                    let mut gx = vec![0.0; n];
                    for r in 0..m {
                        let gr = g.data()[r];
                        for c in 0..n {
                            gx[c] += av.data()[r * n + c] * gr;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, n, ga).unwrap());
                    accumulate(&mut grads, *x, Tensor::vector(gx));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose().unwrap());
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.nodes[i].value;
                    let (m, n) = (p.rows(), p.cols());
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let prow = p.row(r);
                        let grow = &g.data()[r * n..(r + 1) * n];
                        let dotpg: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for c in 0..n {
                            ga[r * n + c] = prow[c] * (grow[c] - dotpg);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, n, ga).unwrap());
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let (rows, n) = ln_rows(xv);
                    let mut gx = vec![0.0; rows * n];
                    let mut ggamma = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    let mut xhat = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let xs = &xv.data()[r * n..(r + 1) * n];
                        let gs = &g.data()[r * n..(r + 1) * n];
                        let mean = xs.iter().sum::<f64>() / n as f64;
                        let var =
                            xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for c in 0..n {
                            xhat[c] = (xs[c] - mean) * inv;
                            dxhat[c] = gs[c] * gv.data()[c];
                        }
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                        for c in 0..n {
                            gx[r * n + c] =
                                inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                            ggamma[c] += gs[c] * xhat[c];
                            gbeta[c] += gs[c];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                    accumulate(&mut grads, *gamma, Tensor::vector(ggamma));
                    accumulate(&mut grads, *beta, Tensor::vector(gbeta));
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| g * gelu_grad_scalar(x))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(xv.shape().to_vec(), data).unwrap());
                }
                Op::Sigmoid(a) => {
                    let s = &self.nodes[i].value;
                    let data = s
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &g)| g * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(s.shape().to_vec(), data).unwrap());
                }
                Op::Relu(a) => {
                    let xv = self.value(*a);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(xv.shape().to_vec(), data).unwrap());
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] = g.data()[c] / m as f64;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, n, ga).unwrap());
                }
                Op::MeanVec(a) => {
                    let n = self.value(*a).len();
                    let gs = g.item() / n as f64;
                    accumulate(&mut grads, *a, Tensor::vector(vec![gs; n]));
                }
                Op::VStack(parts) => {
                    let n = g.cols();
                    let mut row = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let take = if pv.rank() == 1 { 1 } else { pv.rows() };
                        let slice = g.data()[row * n..(row + take) * n].to_vec();
                        let gp = Tensor::new(pv.shape().to_vec(), slice).unwrap();
                        accumulate(&mut grads, p, gp);
                        row += take;
                    }
                }
                Op::HStack(parts) => {
                    if g.rank() == 1 {
                        let mut off = 0;
                        for &p in parts {
                            let w = self.value(p).len();
                            let gp = Tensor::vector(g.data()[off..off + w].to_vec());
                            accumulate(&mut grads, p, gp);
                            off += w;
                        }
                    } else {
                        let (rows, total) = (g.rows(), g.cols());
                        let mut off = 0;
                        for &p in parts {
                            let w = self.value(p).cols();
                            let mut data = vec![0.0; rows * w];
                            for r in 0..rows {
                                data[r * w..(r + 1) * w].copy_from_slice(
                                    &g.data()[r * total + off..r * total + off + w],
                                );
                            }
                            accumulate(&mut grads, p, Tensor::matrix(rows, w, data).unwrap());
                            off += w;
                        }
                    }
                }
                Op::StackScalars(parts) => {
                    for (k, &p) in parts.iter().enumerate() {
                        accumulate(&mut grads, p, Tensor::scalar(g.data()[k]));
                    }
                }
                Op::SliceRows { a, start, end } => {
                    let av = self.value(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let mut ga = vec![0.0; m * n];
                    ga[start * n..*end * n].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, Tensor::matrix(m, n, ga).unwrap());
                }
                Op::SliceCols { a, start, end } => {
                    let av = self.value(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let w = end - start;
                    // scatter straight into the parent slot when possible
                    let slot = slot_or_zeros(&mut grads, *a, &[m, n]);
                    for r in 0..m {
                        let dst = &mut slot.data_mut()[r * n + start..r * n + end];
                        for (d, s) in dst.iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                            *d += s;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(shape).unwrap());
                }
                Op::LogSumExp(a) => {
                    let av = self.value(*a);
                    let max = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = av.data().iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let gs = g.item();
                    let ga = exps.iter().map(|e| gs * e / sum).collect();
                    accumulate(&mut grads, *a, Tensor::vector(ga));
                }
                Op::IndexScalar { a, index } => {
                    let shape = self.value(*a).shape().to_vec();
                    let slot = slot_or_zeros(&mut grads, *a, &shape);
                    slot.data_mut()[*index] += g.item();
                }
                Op::Dot(a, b) => {
                    let gs = g.item();
                    let ga = self.value(*b).scale(gs);
                    let gb = self.value(*a).scale(gs);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Cosine(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (na, nb) = (av.norm(), bv.norm());
                    let cosv = self.nodes[i].value.item();
                    let gs = g.item();
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for k in 0..av.len() {
                        ga[k] = gs * (bv.data()[k] / (na * nb) - cosv * av.data()[k] / (na * na));
                        gb[k] = gs * (av.data()[k] / (na * nb) - cosv * bv.data()[k] / (nb * nb));
                    }
                    accumulate(&mut grads, *a, Tensor::vector(ga));
                    accumulate(&mut grads, *b, Tensor::vector(gb));
                }
            }
        }
        Grads(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: VarId, add: Tensor) {
    match &mut grads[id.0] {
        Some(t) => t.add_assign(&add),
        slot @ None => *slot = Some(add),
    }
}

fn slot_or_zeros<'a>(grads: &'a mut [Option<Tensor>], id: VarId, shape: &[usize]) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Gradients indexed by [`VarId`]; `None` means the node does not influence
/// the root (gradient identically zero).
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.0[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.0[id.0].take()
    }

    /// The gradient as a dense tensor, zeros when absent.
    pub fn dense(&self, id: VarId, shape: &[usize]) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}
