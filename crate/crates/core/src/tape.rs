//! Append-only tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value and whatever
//! it saved for the backward sweep. Inputs always precede outputs, so append
//! order is a topological order and a single reverse pass visits each node
//! exactly once.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Mat};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

/// Vector-Jacobian product for a user-supplied unary op:
/// `(input, output, upstream) -> input gradient`.
pub type CustomVjp = Box<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64>>;

pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxSpatial {
        input: Var,
        positions: usize,
    },
    AvgPoolGlobal {
        input: Var,
        positions: usize,
        channels: usize,
    },
    AvgPool {
        input: Var,
        dims: [usize; 4],
        factor: usize,
    },
    Upsample {
        input: Var,
        dims: [usize; 4],
        factor: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        input: Var,
        start: usize,
        width: usize,
    },
    Reshape(Var),
    ChannelGate {
        gate: Var,
        features: Var,
        channels: usize,
    },
    Mix {
        weights: Var,
        entries: Vec<Var>,
    },
    BroadcastBatch {
        input: Var,
    },
    SoftSelect {
        logits: Var,
        tau: f64,
        k: usize,
    },
    StraightThrough {
        logits: Var,
        soft: Vec<f64>,
        tau: f64,
        k: usize,
    },
    Sum(Var),
    Mean(Var),
    /// Scalar loss whose gradient with respect to `input` was computed in
    /// the forward pass.
    ScalarLoss {
        input: Var,
        grad: Vec<f64>,
    },
    Custom {
        input: Var,
        vjp: CustomVjp,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input, kernel, bias, ..
            } => [Some(*input), Some(*kernel), *bias].into_iter().flatten().collect(),
            Op::Dense {
                input, weight, bias, ..
            } => [Some(*input), Some(*weight), *bias].into_iter().flatten().collect(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BatchNorm {
                input, gamma, beta, ..
            }
            | Op::BatchNormEval {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::ChannelGate { gate, features, .. } => vec![*gate, *features],
            Op::Mix { weights, entries } => {
                let mut v = vec![*weights];
                v.extend_from_slice(entries);
                v
            }
            Op::Activation { input, .. }
            | Op::Scale(input, _)
            | Op::SoftmaxSpatial { input, .. }
            | Op::AvgPoolGlobal { input, .. }
            | Op::AvgPool { input, .. }
            | Op::Upsample { input, .. }
            | Op::Slice { input, .. }
            | Op::Reshape(input)
            | Op::BroadcastBatch { input }
            | Op::SoftSelect { logits: input, .. }
            | Op::StraightThrough { logits: input, .. }
            | Op::Sum(input)
            | Op::Mean(input)
            | Op::ScalarLoss { input, .. }
            | Op::Custom { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_quaternions: usize,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it takes part in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn variable(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn dims(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.dims()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Number of pose losses whose predicted quaternion had to be guarded
    /// against a near-zero norm.
    pub fn degenerate_quaternions(&self) -> usize {
        self.degenerate_quaternions
    }

    pub(crate) fn note_degenerate_quaternion(&mut self) {
        self.degenerate_quaternions += 1;
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every differentiable
    /// leaf are returned; the tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let grads = self.backward_retain(loss)?;
        self.nodes.clear();
        Ok(grads)
    }

    /// Like [`Tape::backward`] but keeps the recorded nodes.
    pub fn backward_retain(&self, loss: Var) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss is not on the tape"))?;
        if loss_node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                loss_node.value.dims()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut out = Gradients {
            grads: vec![None; n],
        };
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads[i] = Some(Tensor::new(node.value.dims(), g)?);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.values();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) = kernels::conv2d_backward(
                    self.value(*input).values(),
                    self.value(*kernel).values(),
                    g,
                    geom,
                    self.needs(*input),
                    self.needs(*kernel),
                    bias.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                n_in,
                n_out,
            } => {
                let gy = Mat::new(g, *rows, *n_out);
                if self.needs(*input) {
                    let mut dx = vec![0.0; rows * n_in];
                    let w = Mat::new(self.value(*weight).values(), *n_in, *n_out);
                    kernels::gemm(gy, w.t(), &mut dx, 0.0);
                    accumulate(grads, *input, dx);
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; n_in * n_out];
                    let x = Mat::new(self.value(*input).values(), *rows, *n_in);
                    kernels::gemm(x.t(), gy, &mut dw, 0.0);
                    accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; *n_out];
                    for row in g.chunks_exact(*n_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).values();
                let dx = match *kind {
                    Activation::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Activation::LeakyRelu(slope) => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { slope * g })
                        .collect(),
                    Activation::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect(),
                    Activation::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (1.0 - y * y)).collect(),
                };
                accumulate(grads, *input, dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).values();
                    accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.needs(*b) {
                    let av = self.value(*a).values();
                    accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::SoftmaxSpatial { input, positions } => {
                let mut dx = vec![0.0; y.len()];
                for ((yc, gc), dc) in y
                    .chunks_exact(*positions)
                    .zip(g.chunks_exact(*positions))
                    .zip(dx.chunks_exact_mut(*positions))
                {
                    kernels::softmax_vjp(yc, gc, dc);
                }
                accumulate(grads, *input, dx);
            }
            Op::AvgPoolGlobal {
                input,
                positions,
                channels,
            } => {
                let batch = g.len() / channels;
                let scale = 1.0 / *positions as f64;
                let mut dx = vec![0.0; batch * positions * channels];
                for b in 0..batch {
                    let gb = &g[b * channels..(b + 1) * channels];
                    for p in 0..*positions {
                        let off = (b * positions + p) * channels;
                        for (d, v) in dx[off..off + channels].iter_mut().zip(gb) {
                            *d = v * scale;
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::AvgPool {
                input,
                dims: [nb, h, w, c],
                factor,
            } => {
                let (oh, ow) = (h / factor, w / factor);
                let scale = 1.0 / (factor * factor) as f64;
                let mut dx = vec![0.0; nb * h * w * c];
                for b in 0..*nb {
                    for y in 0..*h {
                        for x in 0..*w {
                            let src = ((b * oh + y / factor) * ow + x / factor) * c;
                            let dst = ((b * h + y) * w + x) * c;
                            for ch in 0..*c {
                                dx[dst + ch] = g[src + ch] * scale;
                            }
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Upsample {
                input,
                dims: [nb, h, w, c],
                factor,
            } => {
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; nb * h * w * c];
                for b in 0..*nb {
                    for y in 0..oh {
                        for x in 0..ow {
                            let src = ((b * oh + y) * ow + x) * c;
                            let dst = ((b * h + y / factor) * w + x / factor) * c;
                            for ch in 0..*c {
                                dx[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let count = (g.len() / c) as f64;
                let gv = self.value(*gamma).values();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (row_g, row_x) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += row_g[ch];
                        sum_gx[ch] += row_g[ch] * row_x[ch];
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for ((d, row_g), row_x) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch] / count;
                            d[ch] = k * (count * row_g[ch] - sum_g[ch] - row_x[ch] * sum_gx[ch]);
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, sum_gx);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, sum_g);
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let gv = self.value(*gamma).values();
                if self.needs(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for (d, row_g) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ch in 0..c {
                            d[ch] = row_g[ch] * gv[ch] * inv_std[ch];
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (row_g, row_x) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            sum_g[ch] += row_g[ch];
                            sum_gx[ch] += row_g[ch] * row_x[ch];
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(grads, *gamma, sum_gx);
                    }
                    if self.needs(*beta) {
                        accumulate(grads, *beta, sum_g);
                    }
                }
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (v, &wd) in inputs.iter().zip(widths) {
                    if self.needs(*v) {
                        let mut d = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + wd]);
                        }
                        accumulate(grads, *v, d);
                    }
                    offset += wd;
                }
            }
            Op::Slice {
                input,
                start,
                width,
            } => {
                let total = *self.dims(*input).last().unwrap_or(&1);
                let rows = g.len() / width;
                let mut d = vec![0.0; rows * total];
                for r in 0..rows {
                    d[r * total + start..r * total + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(grads, *input, d);
            }
            Op::Reshape(input) => accumulate(grads, *input, g.to_vec()),
            Op::ChannelGate {
                gate,
                features,
                channels,
            } => {
                let c = *channels;
                if self.needs(*gate) {
                    let f = self.value(*features).values();
                    let d = g
                        .chunks_exact(c)
                        .zip(f.chunks_exact(c))
                        .map(|(gr, fr)| gr.iter().zip(fr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, *gate, d);
                }
                if self.needs(*features) {
                    let a = self.value(*gate).values();
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), &av) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(a) {
                        for (dv, gv) in dr.iter_mut().zip(gr) {
                            *dv = gv * av;
                        }
                    }
                    accumulate(grads, *features, d);
                }
            }
            Op::Mix { weights, entries } => {
                let k = entries.len();
                let wv = self.value(*weights).values();
                let batch = wv.len() / k;
                let per = g.len() / batch;
                if self.needs(*weights) {
                    let mut dw = vec![0.0; batch * k];
                    for (j, e) in entries.iter().enumerate() {
                        let ev = self.value(*e).values();
                        for b in 0..batch {
                            let r = b * per..(b + 1) * per;
                            dw[b * k + j] = g[r.clone()].iter().zip(&ev[r]).map(|(a, c)| a * c).sum();
                        }
                    }
                    accumulate(grads, *weights, dw);
                }
                for (j, e) in entries.iter().enumerate() {
                    if !self.needs(*e) {
                        continue;
                    }
                    let mut de = vec![0.0; g.len()];
                    for b in 0..batch {
                        let z = wv[b * k + j];
                        for (d, gv) in de[b * per..(b + 1) * per].iter_mut().zip(&g[b * per..(b + 1) * per]) {
                            *d = z * gv;
                        }
                    }
                    accumulate(grads, *e, de);
                }
            }
            Op::BroadcastBatch { input } => {
                let n = self.value(*input).len();
                let mut d = vec![0.0; n];
                for chunk in g.chunks_exact(n) {
                    for (dv, gv) in d.iter_mut().zip(chunk) {
                        *dv += gv;
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::SoftSelect { logits, tau, k } => {
                accumulate(grads, *logits, relaxed_vjp(y, g, *tau, *k));
            }
            Op::StraightThrough { logits, soft, tau, k } => {
                accumulate(grads, *logits, relaxed_vjp(soft, g, *tau, *k));
            }
            Op::Sum(input) => {
                let n = self.value(*input).len();
                accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::Mean(input) => {
                let n = self.value(*input).len();
                accumulate(grads, *input, vec![g[0] / n as f64; n]);
            }
            Op::ScalarLoss { input, grad } => {
                accumulate(grads, *input, grad.iter().map(|v| v * g[0]).collect());
            }
            Op::Custom { input, vjp } => {
                let d = vjp(self.value(*input), &node.value, g);
                if d.len() != self.value(*input).len() {
                    return Err(Error::contract("custom op returned a mis-sized gradient"));
                }
                accumulate(grads, *input, d);
            }
        }
        Ok(())
    }
}

/// Backward of `softmax((l + g) / τ)` per row of width `k`.
fn relaxed_vjp(soft: &[f64], g: &[f64], tau: f64, k: usize) -> Vec<f64> {
    let mut d = vec![0.0; soft.len()];
    for ((s, gr), dr) in soft.chunks_exact(k).zip(g.chunks_exact(k)).zip(d.chunks_exact_mut(k)) {
        kernels::softmax_vjp(s, gr, dr);
    }
    for v in d.iter_mut() {
        *v /= tau;
    }
    d
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
