//! Differentiable primitives recorded on a [`Tape`].
//!
//! Spatial tensors are NHWC. Rank-3 `[h, w, c]` inputs are accepted wherever
//! a batch is, and treated as a batch of one.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tape::{Activation, CustomVjp, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Train/eval switch for batch-norm and stochastic selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics and hyper-parameters of one batch-norm layer.
/// The affine `gamma`/`beta` are ordinary trainable tensors passed as vars.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormStats {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::config(format!("batch-norm momentum {momentum} outside (0,1)")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::config(format!("batch-norm epsilon {epsilon} must be positive")));
        }
        Ok(Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

pub(crate) fn nhwc(op: &'static str, dims: &[usize]) -> Result<[usize; 4]> {
    match *dims {
        [h, w, c] => Ok([1, h, w, c]),
        [b, h, w, c] => Ok([b, h, w, c]),
        _ => Err(Error::shape(op, dims, &[0, 0, 0, 0])),
    }
}

fn with_spatial(dims: &[usize], h: usize, w: usize, c: usize) -> Vec<usize> {
    if dims.len() == 3 {
        vec![h, w, c]
    } else {
        vec![dims[0], h, w, c]
    }
}

impl Tape {
    /// Stride-1 cross-correlation with a `[kh, kw, c_in, c_out]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let [b, h, w, c_in] = nhwc("conv2d", &xd)?;
        let kd = self.dims(kernel).to_vec();
        let &[kh, kw, kc, c_out] = kd.as_slice() else {
            return Err(Error::shape("conv2d kernel", &kd, &[0, 0, c_in, 0]));
        };
        if kh % 2 == 0 || kw % 2 == 0 || kc != c_in {
            return Err(Error::shape("conv2d", &xd, &kd));
        }
        if let Some(bv) = bias {
            if self.dims(bv) != [c_out] {
                return Err(Error::shape("conv2d bias", self.dims(bv), &[c_out]));
            }
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::shape("conv2d valid", &xd, &kd));
                }
                (0, 0)
            }
        };
        let geom = ConvGeom {
            batch: b,
            h,
            w,
            c_in,
            kh,
            kw,
            c_out,
            pad_h,
            pad_w,
        };
        let out = kernels::conv2d_forward(
            self.value(input).values(),
            self.value(kernel).values(),
            bias.map(|bv| self.value(bv).values()),
            &geom,
        );
        let dims = with_spatial(&xd, geom.out_h(), geom.out_w(), c_out);
        Ok(self.push(
            Tensor::new(&dims, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Affine map `x · W + b` for `x` of shape `[n]` or `[batch, n]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let wd = self.dims(weight).to_vec();
        let (rows, n_in) = match *xd.as_slice() {
            [n] => (1, n),
            [b, n] => (b, n),
            _ => return Err(Error::shape("dense", &xd, &wd)),
        };
        let &[wn, n_out] = wd.as_slice() else {
            return Err(Error::shape("dense", &xd, &wd));
        };
        if wn != n_in {
            return Err(Error::shape("dense", &xd, &wd));
        }
        let mut out = vec![0.0; rows * n_out];
        if let Some(bv) = bias {
            let bt = self.value(bv);
            if bt.dims() != [n_out] {
                return Err(Error::shape("dense bias", bt.dims(), &[n_out]));
            }
            for row in out.chunks_exact_mut(n_out) {
                row.copy_from_slice(bt.values());
            }
        }
        kernels::gemm(
            kernels::Mat::new(self.value(input).values(), rows, n_in),
            kernels::Mat::new(self.value(weight).values(), n_in, n_out),
            &mut out,
            1.0,
        );
        let dims = if xd.len() == 1 { vec![n_out] } else { vec![rows, n_out] };
        Ok(self.push(
            Tensor::new(&dims, out)?,
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                n_in,
                n_out,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        let values: Vec<f64> = match kind {
            Activation::Relu => x.values().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Activation::LeakyRelu(slope) => {
                if !(0.0..1.0).contains(&slope) {
                    return Err(Error::contract(format!("leaky relu slope {slope} outside [0,1)")));
                }
                x.values().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect()
            }
            Activation::Sigmoid => x.values().iter().map(|&v| kernels::sigmoid(v)).collect(),
            Activation::Tanh => x.values().iter().map(|&v| libm::tanh(v)).collect(),
        };
        let t = Tensor::new(x.dims(), values)?;
        Ok(self.push(t, Op::Activation { input, kind }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Tanh)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape(name, ta.dims(), tb.dims()));
        }
        let values = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.dims(), values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::new(x.dims(), x.values().iter().map(|v| v * factor).collect())?;
        Ok(self.push(t, Op::Scale(a, factor)))
    }

    /// Softmax over all spatial positions of a single-channel map, per batch
    /// element.
    pub fn softmax_spatial(&mut self, input: Var) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let [_, h, w, c] = nhwc("softmax_spatial", &dims)?;
        if c != 1 {
            return Err(Error::shape("softmax_spatial", &dims, &with_spatial(&dims, h, w, 1)));
        }
        let positions = h * w;
        let x = self.value(input).values();
        let mut out = vec![0.0; x.len()];
        for (xc, oc) in x.chunks_exact(positions).zip(out.chunks_exact_mut(positions)) {
            kernels::softmax_into(xc, oc);
        }
        Ok(self.push(Tensor::new(&dims, out)?, Op::SoftmaxSpatial { input, positions }))
    }

    /// Per-channel mean over all spatial positions: `[b,h,w,c] -> [b,c]`
    /// (`[h,w,c] -> [c]`).
    pub fn avg_pool_global(&mut self, input: Var) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let [b, h, w, c] = nhwc("avg_pool_global", &dims)?;
        if h == 0 || w == 0 {
            return Err(Error::shape("avg_pool_global", &dims, &[1, 1, c]));
        }
        let positions = h * w;
        let x = self.value(input).values();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for p in 0..positions {
                let off = (bi * positions + p) * c;
                for (ov, xv) in o.iter_mut().zip(&x[off..off + c]) {
                    *ov += xv;
                }
            }
            for ov in o.iter_mut() {
                *ov /= positions as f64;
            }
        }
        let out_dims = if dims.len() == 3 { vec![c] } else { vec![b, c] };
        Ok(self.push(
            Tensor::new(&out_dims, out)?,
            Op::AvgPoolGlobal {
                input,
                positions,
                channels: c,
            },
        ))
    }

    /// Non-overlapping `factor × factor` average pooling.
    pub fn avg_pool(&mut self, input: Var, factor: usize) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let [b, h, w, c] = nhwc("avg_pool", &dims)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::contract(format!("avg_pool factor {factor} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let scale = 1.0 / (factor * factor) as f64;
        let x = self.value(input).values();
        let mut out = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((bi * h + y) * w + xx) * c;
                    let dst = ((bi * oh + y / factor) * ow + xx / factor) * c;
                    for ch in 0..c {
                        out[dst + ch] += x[src + ch];
                    }
                }
            }
        }
        for v in out.iter_mut() {
            *v *= scale;
        }
        Ok(self.push(
            Tensor::new(&with_spatial(&dims, oh, ow, c), out)?,
            Op::AvgPool {
                input,
                dims: [b, h, w, c],
                factor,
            },
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let [b, h, w, c] = nhwc("upsample_nearest", &dims)?;
        if factor == 0 {
            return Err(Error::contract("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = self.value(input).values();
        let mut out = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let dst = ((bi * oh + y) * ow + xx) * c;
                    let src = ((bi * h + y / factor) * w + xx / factor) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
        Ok(self.push(
            Tensor::new(&with_spatial(&dims, oh, ow, c), out)?,
            Op::Upsample {
                input,
                dims: [b, h, w, c],
                factor,
            },
        ))
    }

    /// Batch normalization over every axis but the last (channel) one.
    ///
    /// Train mode normalizes with biased batch statistics and folds them into
    /// the running statistics; eval mode uses the running statistics only.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
    ) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let c = *dims.last().ok_or_else(|| Error::shape("batch_norm", &dims, &[stats.channels()]))?;
        if c != stats.channels() || self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(Error::shape("batch_norm", &dims, &[stats.channels()]));
        }
        let x = self.value(input).values();
        let count = x.len() / c;
        if count == 0 {
            return Err(Error::contract("batch_norm needs at least one element per channel"));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for row in x.chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= count as f64;
                }
                let mut var = vec![0.0; c];
                for row in x.chunks_exact(c) {
                    for ch in 0..c {
                        let d = row[ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= count as f64;
                }
                for ch in 0..c {
                    stats.running_mean[ch] = stats.momentum * stats.running_mean[ch] + (1.0 - stats.momentum) * mean[ch];
                    stats.running_var[ch] = stats.momentum * stats.running_var[ch] + (1.0 - stats.momentum) * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (stats.running_mean.clone(), stats.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + stats.epsilon)).collect();
        let gv = self.value(gamma).values();
        let bv = self.value(beta).values();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ((xr, hr), or) in x.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for ch in 0..c {
                hr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                or[ch] = gv[ch] * hr[ch] + bv[ch];
            }
        }
        let t = Tensor::new(&dims, out)?;
        let op = match mode {
            Mode::Train => Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Mode::Eval => Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        };
        Ok(self.push(t, op))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let lead = self.dims(*first)[..self.dims(*first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for v in inputs {
            let d = self.dims(*v);
            if d.is_empty() || d[..d.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", self.dims(*first), d));
            }
            widths.push(d[d.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v).values()[r * wd..(r + 1) * wd]);
            }
        }
        let mut dims = lead;
        dims.push(total);
        Ok(self.push(
            Tensor::new(&dims, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
        ))
    }

    /// Slice `[start, start + width)` of the last axis.
    pub fn slice_last(&mut self, input: Var, start: usize, width: usize) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let total = *dims.last().unwrap_or(&0);
        if dims.is_empty() || start + width > total {
            return Err(Error::shape("slice_last", &dims, &[start + width]));
        }
        let x = self.value(input).values();
        let rows = x.len() / total;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&x[r * total + start..r * total + start + width]);
        }
        let mut od = dims;
        *od.last_mut().unwrap() = width;
        Ok(self.push(Tensor::new(&od, out)?, Op::Slice { input, start, width }))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshape(dims)?;
        Ok(self.push(t, Op::Reshape(input)))
    }

    /// Multiplies a single-channel map into every channel of `features`.
    pub fn channel_gate(&mut self, gate: Var, features: Var) -> Result<Var> {
        let gd = self.dims(gate).to_vec();
        let fd = self.dims(features).to_vec();
        if gd.is_empty() || fd.len() != gd.len() || gd[gd.len() - 1] != 1 || gd[..gd.len() - 1] != fd[..fd.len() - 1] {
            return Err(Error::shape("channel_gate", &gd, &fd));
        }
        let c = fd[fd.len() - 1];
        let a = self.value(gate).values();
        let f = self.value(features).values();
        let mut out = vec![0.0; f.len()];
        for ((or, fr), &av) in out.chunks_exact_mut(c).zip(f.chunks_exact(c)).zip(a) {
            for (o, fv) in or.iter_mut().zip(fr) {
                *o = av * fv;
            }
        }
        Ok(self.push(
            Tensor::new(&fd, out)?,
            Op::ChannelGate {
                gate,
                features,
                channels: c,
            },
        ))
    }

    /// Per-example weighted sum of candidate tensors: `Σ_j w[b, j] · e_j[b]`.
    ///
    /// `weights` is `[batch, k]` (or `[k]` for a single example); every entry
    /// shares one shape whose leading extent is the batch (or is unbatched).
    pub fn mix(&mut self, weights: Var, entries: &[Var]) -> Result<Var> {
        let k = entries.len();
        let wd = self.dims(weights).to_vec();
        let batch = match *wd.as_slice() {
            [kk] if kk == k => 1,
            [b, kk] if kk == k => b,
            _ => return Err(Error::shape("mix weights", &wd, &[k])),
        };
        let first = *entries.first().ok_or_else(|| Error::contract("mix over an empty bank"))?;
        let ed = self.dims(first).to_vec();
        for e in entries {
            if self.dims(*e) != ed.as_slice() {
                return Err(Error::shape("mix entries", &ed, self.dims(*e)));
            }
        }
        let total: usize = ed.iter().product();
        if total % batch != 0 || (wd.len() == 2 && ed.first() != Some(&batch)) {
            return Err(Error::shape("mix", &wd, &ed));
        }
        let per = total / batch;
        let wv = self.value(weights).values();
        let mut out = vec![0.0; total];
        for (j, e) in entries.iter().enumerate() {
            let ev = self.value(*e).values();
            for b in 0..batch {
                let z = wv[b * k + j];
                if z == 0.0 {
                    continue;
                }
                for (o, v) in out[b * per..(b + 1) * per].iter_mut().zip(&ev[b * per..(b + 1) * per]) {
                    *o += z * v;
                }
            }
        }
        Ok(self.push(
            Tensor::new(&ed, out)?,
            Op::Mix {
                weights,
                entries: entries.to_vec(),
            },
        ))
    }

    /// Repeats `input` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, input: Var, batch: usize) -> Result<Var> {
        let x = self.value(input);
        let mut dims = vec![batch];
        dims.extend_from_slice(x.dims());
        let mut out = Vec::with_capacity(batch * x.len());
        for _ in 0..batch {
            out.extend_from_slice(x.values());
        }
        Ok(self.push(Tensor::new(&dims, out)?, Op::BroadcastBatch { input }))
    }

    fn perturbed_softmax(&self, logits: Var, noise: &[f64], tau: f64) -> Result<(Vec<usize>, usize, Vec<f64>)> {
        if !(tau > 0.0) {
            return Err(Error::contract(format!("temperature must be positive, got {tau}")));
        }
        let dims = self.dims(logits).to_vec();
        let k = *dims.last().ok_or_else(|| Error::shape("gumbel_softmax", &dims, &[1]))?;
        let l = self.value(logits).values();
        if noise.len() != l.len() || dims.len() > 2 || k == 0 {
            return Err(Error::shape("gumbel_softmax noise", &dims, &[noise.len()]));
        }
        let scaled: Vec<f64> = l.iter().zip(noise).map(|(a, g)| (a + g) / tau).collect();
        let mut soft = vec![0.0; l.len()];
        for (s, o) in scaled.chunks_exact(k).zip(soft.chunks_exact_mut(k)) {
            kernels::softmax_into(s, o);
        }
        Ok((dims, k, soft))
    }

    /// `softmax((logits + noise) / τ)` row-wise, differentiable in `logits`.
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &[f64], tau: f64) -> Result<Var> {
        let (dims, k, soft) = self.perturbed_softmax(logits, noise, tau)?;
        Ok(self.push(Tensor::new(&dims, soft)?, Op::SoftSelect { logits, tau, k }))
    }

    /// Hard one-hot of `argmax(logits + noise)` in the forward pass; the
    /// backward pass uses the Jacobian of the relaxed softmax computed with
    /// the same noise.
    pub fn straight_through(&mut self, logits: Var, noise: &[f64], tau: f64) -> Result<Var> {
        let (dims, k, soft) = self.perturbed_softmax(logits, noise, tau)?;
        let l = self.value(logits).values();
        let mut hard = vec![0.0; l.len()];
        for ((lr, nr), hr) in l.chunks_exact(k).zip(noise.chunks_exact(k)).zip(hard.chunks_exact_mut(k)) {
            let perturbed: Vec<f64> = lr.iter().zip(nr).map(|(a, b)| a + b).collect();
            hr[crate::gumbel::argmax(&perturbed)] = 1.0;
        }
        Ok(self.push(Tensor::new(&dims, hard)?, Op::StraightThrough { logits, soft, tau, k }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).values().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(input)))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = x.values().iter().sum::<f64>() / x.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(input)))
    }

    /// Records a scalar whose gradient with respect to `input` is already known.
    pub(crate) fn scalar_loss(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Var {
        debug_assert_eq!(grad.len(), self.value(input).len());
        self.push(Tensor::scalar(value), Op::ScalarLoss { input, grad })
    }

    /// Unary op with caller-supplied forward value and vector-Jacobian product.
    pub fn custom(&mut self, input: Var, output: Tensor, vjp: CustomVjp) -> Var {
        self.push(output, Op::Custom { input, vjp })
    }
}
