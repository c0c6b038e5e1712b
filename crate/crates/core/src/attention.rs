//! Recurrent attention machinery: inception-style multi-kernel
//! convolutions, the Conv-LSTM cell, soft spatial attention and the layer
//! selection head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::BnPosition;
use crate::error::{Error, Result};
use crate::gumbel;
use crate::ops::{BatchNormStats, Mode, Padding};
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore, StatsId};
use crate::rng::Rng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// How branch outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Merge {
    /// Channel-wise concatenation in kernel-size order; each branch emits
    /// `c_out / branches` channels.
    Concat,
    /// Each branch emits `c_out` channels and the branch outputs are summed.
    Sum,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub size: usize,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
}

/// Parallel `same`-padded convolutions with different odd kernel sizes.
#[derive(Clone, Debug)]
pub struct MultiConv {
    pub name: String,
    pub branches: Vec<Branch>,
    pub merge: Merge,
    pub c_in: usize,
    pub c_out: usize,
}

impl MultiConv {
    /// Registers `{name}.k{size}.weight` (and `.bias`) for every branch.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        kernel_sizes: &[usize],
        c_in: usize,
        c_out: usize,
        merge: Merge,
        bias: bool,
    ) -> Result<Self> {
        let n = kernel_sizes.len();
        if n == 0 || kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::Construction(format!("{name}: kernel sizes must be odd and non-empty")));
        }
        let width = match merge {
            Merge::Concat => {
                if c_out % n != 0 {
                    return Err(Error::Construction(format!(
                        "{name}: {c_out} output channels not divisible by {n} branches"
                    )));
                }
                c_out / n
            }
            Merge::Sum => c_out,
        };
        let branches = kernel_sizes
            .iter()
            .map(|&k| {
                let fan_in = k * k * c_in;
                let kernel = store.add(
                    format!("{name}.k{k}.weight"),
                    fan_in_uniform(rng, &[k, k, c_in, width], fan_in),
                );
                let bias = bias.then(|| store.add(format!("{name}.k{k}.bias"), Tensor::zeros(&[width])));
                Branch { size: k, kernel, bias }
            })
            .collect();
        Ok(Self {
            name: name.into(),
            branches,
            merge,
            c_in,
            c_out,
        })
    }

    pub fn branch_width(&self) -> usize {
        match self.merge {
            Merge::Concat => self.c_out / self.branches.len(),
            Merge::Sum => self.c_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let bias = b.bias.map(|id| bound.var(id));
            outs.push(tape.conv2d(x, bound.var(b.kernel), bias, Padding::Same)?);
        }
        match self.merge {
            Merge::Concat if outs.len() == 1 => Ok(outs[0]),
            Merge::Concat => tape.concat_last(&outs),
            Merge::Sum => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = tape.add(acc, o)?;
                }
                Ok(acc)
            }
        }
    }
}

/// Batch-norm with trainable affine parameters and tracked statistics.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    /// Absent where a constant offset cannot change the result.
    pub beta: Option<ParamId>,
    pub stats: StatsId,
}

impl BatchNormLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        shift: bool,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = shift.then(|| store.add(format!("{name}.beta"), Tensor::zeros(&[channels])));
        let stats = store.add_stats(name, BatchNormStats::new(channels, momentum, epsilon)?);
        Ok(Self { gamma, beta, stats })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let beta = match self.beta {
            Some(b) => bound.var(b),
            None => {
                let c = store.stats(self.stats).channels();
                tape.constant(Tensor::zeros(&[c]))
            }
        };
        tape.batch_norm(x, bound.var(self.gamma), beta, store.stats_mut(self.stats), mode)
    }
}

pub const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

/// Conv-LSTM without peepholes; every gate is a multi-kernel convolution of
/// the concatenated `[x, h]`.
#[derive(Clone, Debug)]
pub struct ConvLstm {
    /// Input, forget, output and candidate gates, in that order.
    pub gates: [MultiConv; 4],
    pub h0: ParamId,
    pub c0: ParamId,
    pub hidden: usize,
    pub input_channels: usize,
    pub grid: usize,
}

impl ConvLstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        kernel_sizes: &[usize],
        input_channels: usize,
        hidden: usize,
        grid: usize,
    ) -> Result<Self> {
        let mut make = |g: &str| {
            MultiConv::new(
                store,
                rng,
                &format!("lstm.gate_{g}"),
                kernel_sizes,
                input_channels + hidden,
                hidden,
                Merge::Concat,
                true,
            )
        };
        let gates = [make("i")?, make("f")?, make("o")?, make("g")?];
        for b in &gates[1].branches {
            if let Some(bias) = b.bias {
                store.get_mut(bias).values_mut().fill(1.0);
            }
        }
        let h0 = store.add("lstm.h0", Tensor::zeros(&[grid, grid, hidden]));
        let c0 = store.add("lstm.c0", Tensor::zeros(&[grid, grid, hidden]));
        Ok(Self {
            gates,
            h0,
            c0,
            hidden,
            input_channels,
            grid,
        })
    }

    /// Learned initial state repeated over the batch.
    pub fn initial_state(&self, tape: &mut Tape, bound: &Bound, batch: usize) -> Result<(Var, Var)> {
        let h = tape.broadcast_batch(bound.var(self.h0), batch)?;
        let c = tape.broadcast_batch(bound.var(self.c0), batch)?;
        Ok((h, c))
    }

    /// Pre-activations of the four gates. Branches of equal kernel size are
    /// evaluated as one convolution over the gate-concatenated kernels.
    fn gate_preactivations(&self, tape: &mut Tape, bound: &Bound, xh: Var) -> Result<[Var; 4]> {
        let width = self.gates[0].branch_width();
        let n_branches = self.gates[0].branches.len();
        let mut per_branch = Vec::with_capacity(n_branches);
        for bi in 0..n_branches {
            let kernels: Vec<Var> = self.gates.iter().map(|g| bound.var(g.branches[bi].kernel)).collect();
            let biases: Vec<Var> = self
                .gates
                .iter()
                .filter_map(|g| g.branches[bi].bias.map(|b| bound.var(b)))
                .collect();
            let kernel = tape.concat_last(&kernels)?;
            let bias = if biases.len() == 4 {
                Some(tape.concat_last(&biases)?)
            } else {
                None
            };
            per_branch.push(tape.conv2d(xh, kernel, bias, Padding::Same)?);
        }
        let mut pre = [xh; 4];
        for (gi, slot) in pre.iter_mut().enumerate() {
            let parts = per_branch
                .iter()
                .map(|&out| tape.slice_last(out, gi * width, width))
                .collect::<Result<Vec<_>>>()?;
            *slot = if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat_last(&parts)?
            };
        }
        Ok(pre)
    }

    /// One step: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xd = tape.dims(x).to_vec();
        let hd = tape.dims(h).to_vec();
        if xd.len() != hd.len() || xd.len() < 3 || xd[..xd.len() - 1] != hd[..hd.len() - 1] {
            return Err(Error::shape("convlstm_step", &xd, &hd));
        }
        if tape.dims(c) != hd.as_slice() {
            return Err(Error::shape("convlstm_step cell", tape.dims(c), &hd));
        }
        let xh = tape.concat_last(&[x, h])?;
        let [pi, pf, po, pg] = self.gate_preactivations(tape, bound, xh)?;
        let i = tape.sigmoid(pi)?;
        let f = tape.sigmoid(pf)?;
        let o = tape.sigmoid(po)?;
        let g = tape.tanh(pg)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next)?;
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Soft spatial attention: `A = softmax(act(h ∗ E_h + f) ∗ C_A)`,
/// `O = A ⊙ f`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub embed: MultiConv,
    pub score: MultiConv,
    pub bn: Option<BatchNormLayer>,
    pub bn_position: BnPosition,
    pub activation: Activation,
}

impl SpatialAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        kernel_sizes: &[usize],
        hidden: usize,
        feature_channels: usize,
        activation: Activation,
        bn_position: BnPosition,
        bias: bool,
        bn_momentum: f64,
        bn_epsilon: f64,
    ) -> Result<Self> {
        let embed = MultiConv::new(
            store,
            rng,
            "attn.E_h",
            kernel_sizes,
            hidden,
            feature_channels,
            Merge::Concat,
            // batch-norm right after would cancel the bias
            bias && bn_position != BnPosition::BeforeNonlinearity,
        )?;
        // the spatial softmax is invariant to a constant score offset
        let score = MultiConv::new(store, rng, "attn.C_A", kernel_sizes, feature_channels, 1, Merge::Sum, false)?;
        let bn = match bn_position {
            // the spatial softmax ignores a shift of the score map
            BnPosition::AfterScore => Some(BatchNormLayer::new(store, "attn.bn", 1, false, bn_momentum, bn_epsilon)?),
            BnPosition::BeforeNonlinearity => Some(BatchNormLayer::new(
                store,
                "attn.bn",
                feature_channels,
                true,
                bn_momentum,
                bn_epsilon,
            )?),
            BnPosition::None => None,
        };
        Ok(Self {
            embed,
            score,
            bn,
            bn_position,
            activation,
        })
    }

    /// Returns `(O_att, A)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &mut ParamStore,
        f: Var,
        h: Var,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let h_att = self.embed.forward(tape, bound, h)?;
        if tape.dims(h_att) != tape.dims(f) {
            return Err(Error::shape("spatial_attention", tape.dims(h_att), tape.dims(f)));
        }
        let mut pre = tape.add(h_att, f)?;
        if let (BnPosition::BeforeNonlinearity, Some(bn)) = (self.bn_position, &self.bn) {
            pre = bn.forward(tape, bound, store, pre, mode)?;
        }
        let f_att = tape.activation(pre, self.activation)?;
        let mut scores = self.score.forward(tape, bound, f_att)?;
        if let (BnPosition::AfterScore, Some(bn)) = (self.bn_position, &self.bn) {
            scores = bn.forward(tape, bound, store, scores, mode)?;
        }
        let a = tape.softmax_spatial(scores)?;
        let o = tape.channel_gate(a, f)?;
        Ok((o, a))
    }
}

/// How a selection is turned into bank weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// One-hot forward, relaxed backward.
    StraightThrough,
    /// Relaxed softmax in both passes (the differentiable surrogate).
    Soft,
}

/// Layer selection logits from the previous hidden state:
/// global average pool, gate embedding, batch-norm, logit layer.
#[derive(Clone, Debug)]
pub struct SelectionHead {
    pub embed_w: ParamId,
    pub bn: BatchNormLayer,
    pub logit_w: ParamId,
    pub logit_b: ParamId,
    pub bank_size: usize,
}

impl SelectionHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        hidden: usize,
        embed: usize,
        bank_size: usize,
        zero_init_logits: bool,
        bn_momentum: f64,
        bn_epsilon: f64,
    ) -> Result<Self> {
        let embed_w = store.add("select.embed.weight", fan_in_uniform(rng, &[hidden, embed], hidden));
        let bn = BatchNormLayer::new(store, "select.bn", embed, true, bn_momentum, bn_epsilon)?;
        let logit_init = if zero_init_logits {
            Tensor::zeros(&[embed, bank_size])
        } else {
            fan_in_uniform(rng, &[embed, bank_size], embed)
        };
        let logit_w = store.add("select.logits.weight", logit_init);
        let logit_b = store.add("select.logits.bias", Tensor::zeros(&[bank_size]));
        Ok(Self {
            embed_w,
            bn,
            logit_w,
            logit_b,
            bank_size,
        })
    }

    pub fn logits(&self, tape: &mut Tape, bound: &Bound, store: &mut ParamStore, h: Var, mode: Mode) -> Result<Var> {
        let pooled = tape.avg_pool_global(h)?;
        // no bias: batch-norm follows
        let e = tape.dense(pooled, bound.var(self.embed_w), None)?;
        let e = self.bn.forward(tape, bound, store, e, mode)?;
        tape.dense(e, bound.var(self.logit_w), Some(bound.var(self.logit_b)))
    }

    /// Selection weights from logits and a noise realization (`None` means
    /// noiseless argmax).
    pub fn select(
        &self,
        tape: &mut Tape,
        logits: Var,
        noise: Option<&[f64]>,
        tau: f64,
        relaxation: Relaxation,
    ) -> Result<Var> {
        let zeros;
        let noise = match noise {
            Some(n) => n,
            None => {
                zeros = vec![0.0; tape.value(logits).len()];
                &zeros
            }
        };
        match relaxation {
            Relaxation::StraightThrough => tape.straight_through(logits, noise, tau),
            Relaxation::Soft => tape.gumbel_softmax(logits, noise, tau),
        }
    }

    /// Full head: logits plus the one-hot choice. Train mode samples fresh
    /// noise from `rng`; eval mode takes the noiseless argmax. A bank of one
    /// bypasses the Gumbel machinery.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &mut ParamStore,
        h: Var,
        rng: &mut Rng,
        tau: f64,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let logits = self.logits(tape, bound, store, h, mode)?;
        let dims = tape.dims(logits).to_vec();
        if self.bank_size == 1 {
            let ones = tape.constant(Tensor::full(&dims, 1.0));
            return Ok((ones, logits));
        }
        let choice = match mode {
            Mode::Train => {
                let noise = gumbel::gumbel_noise(rng, tape.value(logits).len());
                self.select(tape, logits, Some(&noise), tau, Relaxation::StraightThrough)?
            }
            Mode::Eval => self.select(tape, logits, None, tau, Relaxation::StraightThrough)?,
        };
        Ok((choice, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn rand_tensor(rng: &mut Rng, dims: &[usize]) -> Tensor {
        crate::params::uniform_tensor(rng, dims, 1.0)
    }

    #[test]
    fn multi_conv_identity_and_shapes() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1, 0);
        let mc = MultiConv::new(&mut store, &mut rng, "t", &[1], 1, 1, Merge::Concat, true).unwrap();
        store.set_values("t.k1.weight", &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x_t = rand_tensor(&mut rng, &[4, 4, 1]);
        let x = tape.constant(x_t.clone());
        let y = mc.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).values(), x_t.values());

        let mut store = ParamStore::new();
        let mc = MultiConv::new(&mut store, &mut rng, "t", &[1, 3], 3, 8, Merge::Concat, true).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(rand_tensor(&mut rng, &[2, 5, 5, 3]));
        let y = mc.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.dims(y), &[2, 5, 5, 8]);

        let err = MultiConv::new(&mut store, &mut rng, "u", &[1, 3, 5], 3, 8, Merge::Concat, true);
        assert!(matches!(err, Err(Error::Construction(_))));
    }

    #[test]
    fn multi_conv_gradient() {
        let mut rng = Rng::new(2, 0);
        let mut store = ParamStore::new();
        let mc = MultiConv::new(&mut store, &mut rng, "t", &[1, 3, 5], 2, 6, Merge::Concat, true).unwrap();
        let readout = rand_tensor(&mut rng, &[5, 5, 6]);
        let mut inputs = vec![rand_tensor(&mut rng, &[5, 5, 2])];
        inputs.extend(store.params().iter().map(|p| {
            let mut t = rand_tensor(&mut rng, p.tensor.dims());
            t.set_requires_grad(false);
            t
        }));
        let err = grad_check(
            |tape, v| {
                let bound = Bound::from_vars(v[1..].to_vec());
                let y = mc.forward(tape, &bound, v[0])?;
                let w = tape.constant(readout.clone());
                let p = tape.mul(y, w)?;
                tape.sum(p)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "multi_conv rel err {err}");
    }

    fn zero_lstm() -> (ParamStore, ConvLstm) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3, 0);
        let lstm = ConvLstm::new(&mut store, &mut rng, &[1, 3], 2, 4, 3).unwrap();
        for p in store.params_mut() {
            p.tensor.values_mut().fill(0.0);
        }
        (store, lstm)
    }

    #[test]
    fn convlstm_zero_weights_closed_form() {
        let (store, lstm) = zero_lstm();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[3, 3, 2], 0.7));
        let h = tape.constant(Tensor::zeros(&[3, 3, 4]));
        let c = tape.constant(Tensor::zeros(&[3, 3, 4]));
        let (h1, c1) = lstm.step(&mut tape, &bound, x, h, c).unwrap();
        assert!(tape.value(c1).values().iter().all(|&v| v == 0.0));
        assert!(tape.value(h1).values().iter().all(|&v| v == 0.0));

        let c0 = 1.3;
        let c = tape.constant(Tensor::full(&[3, 3, 4], c0));
        let (h1, c1) = lstm.step(&mut tape, &bound, x, h, c).unwrap();
        assert!(tape.value(c1).values().iter().all(|&v| (v - 0.5 * c0).abs() < 1e-15));
        let expect = 0.5 * libm::tanh(0.5 * c0);
        assert!(tape.value(h1).values().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn convlstm_forget_bias_and_names() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4, 0);
        ConvLstm::new(&mut store, &mut rng, &[1, 3, 5, 7], 3, 8, 4).unwrap();
        for k in [1, 3, 5, 7] {
            let f = store.find(&format!("lstm.gate_f.k{k}.bias")).unwrap();
            assert!(store.get(f).values().iter().all(|&v| v == 1.0));
            let i = store.find(&format!("lstm.gate_i.k{k}.bias")).unwrap();
            assert!(store.get(i).values().iter().all(|&v| v == 0.0));
            assert_eq!(store.get(store.find(&format!("lstm.gate_g.k{k}.weight")).unwrap()).dims(), &[k, k, 11, 2]);
        }
        assert_eq!(store.get(store.find("lstm.h0").unwrap()).dims(), &[4, 4, 8]);
    }

    #[test]
    fn convlstm_spatial_mismatch() {
        let (store, lstm) = zero_lstm();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[4, 4, 2]));
        let h = tape.constant(Tensor::zeros(&[3, 3, 4]));
        assert!(matches!(lstm.step(&mut tape, &bound, x, h, h), Err(Error::Shape { .. })));
    }

    #[test]
    fn convlstm_step_gradient() {
        let mut rng = Rng::new(5, 0);
        let mut store = ParamStore::new();
        let lstm = ConvLstm::new(&mut store, &mut rng, &[1, 3], 2, 4, 3).unwrap();
        let readout_h = rand_tensor(&mut rng, &[2, 3, 3, 4]);
        let readout_c = rand_tensor(&mut rng, &[2, 3, 3, 4]);
        let mut inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 3, 2]),
            rand_tensor(&mut rng, &[2, 3, 3, 4]),
            rand_tensor(&mut rng, &[2, 3, 3, 4]),
        ];
        inputs.extend(store.params().iter().map(|p| rand_tensor(&mut rng, p.tensor.dims())));
        let err = grad_check(
            |tape, v| {
                let bound = Bound::from_vars(v[3..].to_vec());
                let (h, c) = lstm.step(tape, &bound, v[0], v[1], v[2])?;
                let wh = tape.constant(readout_h.clone());
                let wc = tape.constant(readout_c.clone());
                let a = tape.mul(h, wh)?;
                let b = tape.mul(c, wc)?;
                let s = tape.add(a, b)?;
                tape.sum(s)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "convlstm rel err {err}");
    }

    fn attention(store: &mut ParamStore, rng: &mut Rng, bn: BnPosition) -> SpatialAttention {
        SpatialAttention::new(store, rng, &[1, 3, 5], 4, 3, Activation::Relu, bn, true, 0.99, 1e-3).unwrap()
    }

    #[test]
    fn attention_constant_scores_and_zero_features() {
        let mut rng = Rng::new(6, 0);
        let mut store = ParamStore::new();
        let att = attention(&mut store, &mut rng, BnPosition::None);
        for name in ["attn.C_A.k1.weight", "attn.C_A.k3.weight", "attn.C_A.k5.weight"] {
            let id = store.find(name).unwrap();
            store.get_mut(id).values_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f_t = rand_tensor(&mut rng, &[4, 4, 3]);
        let f = tape.constant(f_t.clone());
        let h = tape.constant(rand_tensor(&mut rng, &[4, 4, 4]));
        let (o, a) = att.forward(&mut tape, &bound, &mut store, f, h, Mode::Train).unwrap();
        assert!(tape.value(a).values().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        for (ov, fv) in tape.value(o).values().iter().zip(f_t.values()) {
            assert!((ov - fv / 16.0).abs() < 1e-15);
        }

        let mut store = ParamStore::new();
        let att = attention(&mut store, &mut rng, BnPosition::AfterScore);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.constant(Tensor::zeros(&[2, 4, 4, 3]));
        let h = tape.constant(rand_tensor(&mut rng, &[2, 4, 4, 4]));
        let (o, _) = att.forward(&mut tape, &bound, &mut store, f, h, Mode::Train).unwrap();
        assert!(tape.value(o).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_channel_mismatch() {
        let mut rng = Rng::new(7, 0);
        let mut store = ParamStore::new();
        let att = attention(&mut store, &mut rng, BnPosition::AfterScore);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.constant(Tensor::zeros(&[4, 4, 6]));
        let h = tape.constant(Tensor::zeros(&[4, 4, 4]));
        assert!(matches!(
            att.forward(&mut tape, &bound, &mut store, f, h, Mode::Train),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn attention_map_normalized_and_gradient() {
        let mut rng = Rng::new(8, 0);
        for trial in 0..100 {
            let mut store = ParamStore::new();
            let att = attention(&mut store, &mut rng, BnPosition::AfterScore);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let f = tape.constant(rand_tensor(&mut rng, &[2, 4, 4, 3]));
            let h = tape.constant(rand_tensor(&mut rng, &[2, 4, 4, 4]));
            let (_, a) = att.forward(&mut tape, &bound, &mut store, f, h, Mode::Train).unwrap();
            for chunk in tape.value(a).values().chunks(16) {
                assert!(chunk.iter().all(|&v| v > 0.0), "trial {trial}");
                assert!((chunk.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        for bn in [BnPosition::AfterScore, BnPosition::BeforeNonlinearity] {
            let mut store = ParamStore::new();
            let att = SpatialAttention::new(
                &mut store,
                &mut rng,
                &[1, 3, 5],
                4,
                3,
                Activation::LeakyRelu(0.01),
                bn,
                true,
                0.99,
                1e-3,
            )
            .unwrap();
            let readout = rand_tensor(&mut rng, &[2, 4, 4, 3]);
            let mut inputs = vec![rand_tensor(&mut rng, &[2, 4, 4, 3]), rand_tensor(&mut rng, &[2, 4, 4, 4])];
            inputs.extend(store.params().iter().map(|p| rand_tensor(&mut rng, p.tensor.dims())));
            let report = crate::gradcheck::grad_check_report(
                |tape, v| {
                    let mut s = store.clone();
                    let bound = Bound::from_vars(v[2..].to_vec());
                    let (o, _) = att.forward(tape, &bound, &mut s, v[0], v[1], Mode::Train)?;
                    let w = tape.constant(readout.clone());
                    let p = tape.mul(o, w)?;
                    tape.sum(p)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-5, "{bn:?} attention {report:?}");
        }
    }

    #[test]
    fn selection_head_contracts() {
        let mut rng = Rng::new(9, 0);
        let mut store = ParamStore::new();
        let head = SelectionHead::new(&mut store, &mut rng, 8, 2, 4, false, 0.99, 1e-3).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h = tape.constant(rand_tensor(&mut rng, &[3, 4, 4, 8]));
        let (z, logits) = head
            .forward(&mut tape, &bound, &mut store, h, &mut rng, 0.7, Mode::Train)
            .unwrap();
        assert_eq!(tape.dims(logits), &[3, 4]);
        for row in tape.value(z).values().chunks(4) {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }

        // forced logits
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![5.0, 0.0, 0.0, 0.0]));
        let z = head.select(&mut tape, l, None, 1.0, Relaxation::StraightThrough).unwrap();
        assert_eq!(tape.value(z).values(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn selection_head_eval_ignores_rng() {
        let mut rng = Rng::new(10, 0);
        let mut store = ParamStore::new();
        let head = SelectionHead::new(&mut store, &mut rng, 8, 2, 4, false, 0.99, 1e-3).unwrap();
        let h_t = rand_tensor(&mut rng, &[5, 4, 4, 8]);
        let mut picks = Vec::new();
        for seed in 0..2 {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let h = tape.constant(h_t.clone());
            let mut r = Rng::new(seed, 77);
            let (z, _) = head.forward(&mut tape, &bound, &mut store, h, &mut r, 0.5, Mode::Eval).unwrap();
            picks.push(tape.value(z).clone());
        }
        assert_eq!(picks[0], picks[1]);
    }

    #[test]
    fn zero_initialized_head_selects_uniformly() {
        let mut rng = Rng::new(12, 0);
        let mut store = ParamStore::new();
        let head = SelectionHead::new(&mut store, &mut rng, 8, 2, 4, true, 0.99, 1e-3).unwrap();
        let draws = 100_000;
        let batch = 1000;
        let mut counts = [0usize; 4];
        let mut noise_rng = Rng::new(13, 0);
        for _ in 0..draws / batch {
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let h = tape.constant(rand_tensor(&mut rng, &[batch, 2, 2, 8]));
            let (z, logits) = head
                .forward(&mut tape, &bound, &mut store, h, &mut noise_rng, 1.0, Mode::Train)
                .unwrap();
            assert!(tape.value(logits).values().iter().all(|&l| l == 0.0));
            for row in tape.value(z).values().chunks(4) {
                counts[gumbel::argmax(row)] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.25).abs() <= 0.01, "{counts:?}");
        }
    }
}
