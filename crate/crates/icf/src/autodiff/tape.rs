//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on an append-only [`Tape`]; [`Tape::backward`]
//! replays them in reverse to accumulate gradients for every leaf. One tape
//! per training step; tapes are not shared across threads.

use super::tensor::Tensor;
use crate::error::{IcfError, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    // the source id is kept for Debug output; backward treats a detached
    // node as a leaf
    #[allow(dead_code)]
    Detach(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    // the offset is kept for Debug output; its gradient is identity
    AddScalar(NodeId, #[allow(dead_code)] f64),
    Sum(NodeId),
    Mean(NodeId),
    Matmul(NodeId, NodeId),
    Bilinear(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Log(NodeId, f64),
    Softmax(NodeId),
    L2Normalize(NodeId, f64),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        stride: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    Slice {
        src: NodeId,
        start: usize,
        len: usize,
    },
    Index(NodeId, usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of forward operations. Parent ids always precede
/// child ids, so a single reverse sweep propagates all gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {:?}",
            op
        );
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Register an input tensor; leaves receive gradients in backward.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, Tensor::scalar(v))
    }

    /// Identity forward, zero gradient backward.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.push(Op::Detach(a), v)
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let scalar_ok = self.nodes[a].value.is_scalar() || self.nodes[b].value.is_scalar();
        if sa != sb && !scalar_ok {
            return Err(IcfError::ShapeMismatch {
                context,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise add; one side may be a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "add")?;
        let v = ew(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "sub")?;
        let v = ew(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise (Hadamard) product; one side may be a scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "mul")?;
        let v = ew(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.scale_in_place(-1.0);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.scale_in_place(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for x in v.data_mut() {
            *x += s;
        }
        self.push(Op::AddScalar(a, s), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let d = self.nodes[a].value.data();
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(IcfError::ShapeMismatch {
                context: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let v = matmul_vals(ta, tb);
        Ok(self.push(Op::Matmul(a, b), v))
    }

    /// Flattened outer product: out[i*nb + j] = a[i] * b[j]. Both rank-1.
    pub fn bilinear(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(IcfError::ShapeMismatch {
                context: "bilinear (rank-1 expected)",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (na, nb) = (ta.len(), tb.len());
        let mut out = Vec::with_capacity(na * nb);
        for i in 0..na {
            for j in 0..nb {
                out.push(ta.data()[i] * tb.data()[j]);
            }
        }
        Ok(self.push(Op::Bilinear(a, b), Tensor::vector(out)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = map(&self.nodes[a].value, f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map(&self.nodes[a].value, |x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = map(&self.nodes[a].value, |x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = map(&self.nodes[a].value, f64::exp);
        self.push(Op::Exp(a), v)
    }

    /// Natural log of (x + eps). Inputs must be nonnegative.
    pub fn log(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if self.nodes[a].value.data().iter().any(|&x| x < 0.0) {
            return Err(IcfError::Domain("log of negative input".into()));
        }
        let v = map(&self.nodes[a].value, |x| (x + eps).ln());
        Ok(self.push(Op::Log(a, eps), v))
    }

    /// Softmax over the last axis (rows for rank-2, the whole vector for rank-1).
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let cols = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(Op::Softmax(a), v)
    }

    /// x / max(||x||, eps).
    pub fn l2_normalize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let t = &self.nodes[a].value;
        let n = t.norm().max(eps);
        let v = map(t, |x| x / n);
        self.push(Op::L2Normalize(a, eps), v)
    }

    /// Valid cross-correlation. input: [C_in, H, W], kernels: [C_out, C_in, k, k].
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, stride: usize) -> Result<NodeId> {
        let (ti, tk) = (&self.nodes[input].value, &self.nodes[kernels].value);
        if ti.rank() != 3 || tk.rank() != 4 || ti.shape()[0] != tk.shape()[1] {
            return Err(IcfError::ShapeMismatch {
                context: "conv2d",
                lhs: ti.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let k = tk.shape()[2];
        if tk.shape()[3] != k {
            return Err(IcfError::Dimension("conv2d kernels must be square".into()));
        }
        let (h, w) = (ti.shape()[1], ti.shape()[2]);
        if h < k || w < k {
            return Err(IcfError::Dimension(format!(
                "conv2d kernel {}x{} larger than input {}x{}",
                k, k, h, w
            )));
        }
        let v = conv2d_forward(ti, tk, stride);
        Ok(self.push(Op::Conv2d { input, kernels, stride }, v))
    }

    /// Training-mode batch normalization over [B, F]; biased variance.
    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.rank() != 2 {
            return Err(IcfError::Dimension("batchnorm expects [B, F]".into()));
        }
        let (b, f) = (t.shape()[0], t.shape()[1]);
        if b < 2 {
            return Err(IcfError::Config(
                "batchnorm in training mode needs batch size >= 2 (disable batchnorm for single-sample batches)".into(),
            ));
        }
        let (tg, tb) = (&self.nodes[gamma].value, &self.nodes[beta].value);
        if tg.len() != f || tb.len() != f {
            return Err(IcfError::Dimension("batchnorm gamma/beta must have F entries".into()));
        }
        let (mean, var) = bn_stats(t);
        let mut out = vec![0.0; b * f];
        for i in 0..b {
            for j in 0..f {
                let xhat = (t.at2(i, j) - mean[j]) / (var[j] + eps).sqrt();
                out[i * f + j] = tg.data()[j] * xhat + tb.data()[j];
            }
        }
        let v = Tensor::new(vec![b, f], out).unwrap();
        Ok(self.push(Op::BatchNorm { x, gamma, beta, eps }, v))
    }

    /// Flat concatenation of any tensors, returned rank-1.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(IcfError::Degenerate("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.nodes[p].value.data());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[a].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Contiguous flat slice, returned rank-1.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if start + len > t.len() {
            return Err(IcfError::Dimension(format!(
                "slice {}..{} out of range for length {}",
                start,
                start + len,
                t.len()
            )));
        }
        let v = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice { src: a, start, len }, v))
    }

    /// Scalar pick by flat index.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if i >= t.len() {
            return Err(IcfError::Dimension(format!(
                "index {} out of range for length {}",
                i,
                t.len()
            )));
        }
        let v = Tensor::scalar(t.data()[i]);
        Ok(self.push(Op::Index(a, i), v))
    }

    // -- composite helpers -------------------------------------------------

    /// sum(a * b) for same-shaped tensors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    /// ||a - b||^2.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let d2 = self.mul(d, d)?;
        Ok(self.sum(d2))
    }

    /// Mean squared error between same-shaped tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let d2 = self.mul(d, d)?;
        Ok(self.mean(d2))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss; returns per-node gradients
    /// (None for nodes the loss does not depend on).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(IcfError::Degenerate("backward on empty tape".into()));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(IcfError::Dimension(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        // A scalar parent used in a broadcast op receives the summed gradient.
        let contrib = if self.nodes[id].value.is_scalar() && contrib.len() > 1 {
            Tensor::scalar(contrib.data().iter().sum())
        } else {
            contrib
        };
        match &mut grads[id] {
            Some(g) => g.add_in_place(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, shape_like(g, &self.nodes[*a].value));
                self.accumulate(grads, *b, shape_like(g, &self.nodes[*b].value));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, shape_like(g, &self.nodes[*a].value));
                let mut gb = shape_like(g, &self.nodes[*b].value);
                gb.scale_in_place(-1.0);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, ew_grad(g, tb, ta));
                self.accumulate(grads, *b, ew_grad(g, ta, tb));
            }
            Op::Neg(a) => {
                let mut ga = g.clone();
                ga.scale_in_place(-1.0);
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.scale_in_place(*s);
                self.accumulate(grads, *a, ga);
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Sum(a) => {
                let t = &self.nodes[*a].value;
                self.accumulate(grads, *a, Tensor::full(t.shape(), g.item()));
            }
            Op::Mean(a) => {
                let t = &self.nodes[*a].value;
                self.accumulate(grads, *a, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                // dA = g @ B^T ; dB = A^T @ g
                self.accumulate(grads, *a, matmul_bt(g, tb));
                self.accumulate(grads, *b, matmul_at(ta, g));
            }
            Op::Bilinear(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (na, nb) = (ta.len(), tb.len());
                let mut ga = vec![0.0; na];
                let mut gb = vec![0.0; nb];
                for i in 0..na {
                    for j in 0..nb {
                        let gij = g.data()[i * nb + j];
                        ga[i] += gij * tb.data()[j];
                        gb[j] += gij * ta.data()[i];
                    }
                }
                self.accumulate(grads, *a, Tensor::vector(ga));
                self.accumulate(grads, *b, Tensor::vector(gb));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let mut ga = g.clone();
                for (gi, yi) in ga.data_mut().iter_mut().zip(y.data()) {
                    *gi *= 1.0 - yi * yi;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let mut ga = g.clone();
                for (gi, xi) in ga.data_mut().iter_mut().zip(x.data()) {
                    if *xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.nodes[*a].value;
                let mut ga = g.clone();
                for (gi, xi) in ga.data_mut().iter_mut().zip(x.data()) {
                    if *xi <= 0.0 {
                        *gi *= slope;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let mut ga = g.clone();
                for (gi, yi) in ga.data_mut().iter_mut().zip(y.data()) {
                    *gi *= yi;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a, eps) => {
                let x = &self.nodes[*a].value;
                let mut ga = g.clone();
                for (gi, xi) in ga.data_mut().iter_mut().zip(x.data()) {
                    *gi /= xi + eps;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[id].value;
                let cols = *y.shape().last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for (r, (yrow, grow)) in y.data().chunks(cols).zip(g.data().chunks(cols)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..cols {
                        ga[r * cols + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), ga).unwrap());
            }
            Op::L2Normalize(a, eps) => {
                let x = &self.nodes[*a].value;
                let n = x.norm();
                let ga = if n > *eps {
                    let y = &self.nodes[id].value;
                    let dot: f64 = y.data().iter().zip(g.data()).map(|(yi, gi)| yi * gi).sum();
                    let mut ga = g.clone();
                    for (gi, yi) in ga.data_mut().iter_mut().zip(y.data()) {
                        *gi = (*gi - yi * dot) / n;
                    }
                    ga
                } else {
                    let mut ga = g.clone();
                    ga.scale_in_place(1.0 / eps);
                    ga
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Conv2d { input, kernels, stride } => {
                let (ti, tk) = (&self.nodes[*input].value, &self.nodes[*kernels].value);
                let (gi, gk) = conv2d_backward(ti, tk, *stride, g);
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *kernels, gk);
            }
            Op::BatchNorm { x, gamma, beta, eps } => {
                let t = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let (b, f) = (t.shape()[0], t.shape()[1]);
                let (mean, var) = bn_stats(t);
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut dx = vec![0.0; b * f];
                for j in 0..f {
                    let inv_std = 1.0 / (var[j] + eps).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for i in 0..b {
                        let xhat = (t.at2(i, j) - mean[j]) * inv_std;
                        let gij = g.at2(i, j);
                        dgamma[j] += gij * xhat;
                        dbeta[j] += gij;
                        sum_g += gij;
                        sum_gx += gij * xhat;
                    }
                    let gscale = tg.data()[j] * inv_std;
                    for i in 0..b {
                        let xhat = (t.at2(i, j) - mean[j]) * inv_std;
                        dx[i * f + j] = gscale
                            * (g.at2(i, j) - sum_g / b as f64 - xhat * sum_gx / b as f64);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![b, f], dx).unwrap());
                self.accumulate(grads, *gamma, Tensor::vector(dgamma));
                self.accumulate(grads, *beta, Tensor::vector(dbeta));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let gs = Tensor::new(t.shape().to_vec(), g.data()[off..off + t.len()].to_vec())
                        .unwrap();
                    off += t.len();
                    self.accumulate(grads, p, gs);
                }
            }
            Op::Reshape(a) => {
                let t = &self.nodes[*a].value;
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(t.shape().to_vec(), g.data().to_vec()).unwrap(),
                );
            }
            Op::Slice { src, start, len } => {
                let t = &self.nodes[*src].value;
                let mut gs = Tensor::zeros(t.shape());
                gs.data_mut()[*start..*start + *len].copy_from_slice(g.data());
                self.accumulate(grads, *src, gs);
            }
            Op::Index(a, i) => {
                let t = &self.nodes[*a].value;
                let mut gs = Tensor::zeros(t.shape());
                gs.data_mut()[*i] = g.item();
                self.accumulate(grads, *a, gs);
            }
        }
    }
}

/// Result of a backward pass; gradients by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, zeros if the loss did not touch it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

// -- value-level helpers ---------------------------------------------------

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

/// Elementwise combine with scalar broadcast on either side.
fn ew(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
        .unwrap()
    } else if b.is_scalar() {
        let s = b.item();
        map(a, |x| f(x, s))
    } else {
        let s = a.item();
        map(b, |y| f(s, y))
    }
}

/// Gradient of a Mul parent: g * other, reduced to `target`'s shape by the caller.
fn ew_grad(g: &Tensor, other: &Tensor, target: &Tensor) -> Tensor {
    let full = ew(g, other, |x, y| x * y);
    if target.is_scalar() && full.len() > 1 {
        Tensor::scalar(full.data().iter().sum())
    } else {
        full
    }
}

/// Reshape a broadcast gradient onto the parent's shape.
fn shape_like(g: &Tensor, target: &Tensor) -> Tensor {
    if target.is_scalar() && g.len() > 1 {
        Tensor::scalar(g.data().iter().sum())
    } else {
        g.clone()
    }
}

fn matmul_vals(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aip * b.data()[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// g [m,n] @ b^T [n,k] -> [m,k]
fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += g.data()[i * n + j] * b.data()[p * n + j];
            }
            out[i * k + p] = s;
        }
    }
    Tensor::new(vec![m, k], out).unwrap()
}

/// a^T [k,m] @ g [m,n] -> [k,n]
fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                out[p * n + j] += aip * g.data()[i * n + j];
            }
        }
    }
    Tensor::new(vec![k, n], out).unwrap()
}

fn conv2d_forward(input: &Tensor, kernels: &Tensor, stride: usize) -> Tensor {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, k) = (kernels.shape()[0], kernels.shape()[2]);
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            s += input.data()[(ci * h + iy) * w + ix]
                                * kernels.data()[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = s;
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out).unwrap()
}

fn conv2d_backward(input: &Tensor, kernels: &Tensor, stride: usize, g: &Tensor) -> (Tensor, Tensor) {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, k) = (kernels.shape()[0], kernels.shape()[2]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let mut gi = vec![0.0; cin * h * w];
    let mut gk = vec![0.0; cout * cin * k * k];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = g.data()[(co * ho + oy) * wo + ox];
                if go == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            gi[(ci * h + iy) * w + ix] +=
                                go * kernels.data()[((co * cin + ci) * k + ky) * k + kx];
                            gk[((co * cin + ci) * k + ky) * k + kx] +=
                                go * input.data()[(ci * h + iy) * w + ix];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![cin, h, w], gi).unwrap(),
        Tensor::new(vec![cout, cin, k, k], gk).unwrap(),
    )
}

fn bn_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, f) = (t.shape()[0], t.shape()[1]);
    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    for i in 0..b {
        for j in 0..f {
            mean[j] += t.at2(i, j);
        }
    }
    for m in mean.iter_mut() {
        *m /= b as f64;
    }
    for i in 0..b {
        for j in 0..f {
            let d = t.at2(i, j) - mean[j];
            var[j] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= b as f64;
    }
    (mean, var)
}
