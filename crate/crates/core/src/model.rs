//! Model assembly: backbone, layer bank, the recurrent probe loop and the
//! prediction head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{ConvLstm, Relaxation, SelectionHead, SpatialAttention};
use crate::config::{Ablation, AggregateMode, Config, Task};
use crate::error::{Error, Result};
use crate::gumbel;
use crate::ops::{Mode, Padding};
use crate::params::{fan_in_uniform, uniform_tensor, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stream id of the initialization generator.
pub const INIT_STREAM: u64 = 0x1417;

/// Small convolutional feature extractor: 3×3 conv + ReLU stages with 2×2
/// average pooling between them.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, in_channels: usize, widths: &[usize]) -> Self {
        let mut prev = in_channels;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let fan_in = 9 * prev;
                let k = store.add(
                    format!("backbone.stage{i}.weight"),
                    uniform_tensor(rng, &[3, 3, prev, c], libm::sqrt(6.0 / fan_in as f64)),
                );
                let b = store.add(format!("backbone.stage{i}.bias"), Tensor::zeros(&[c]));
                prev = c;
                (k, b)
            })
            .collect();
        Self { stages }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Vec<Var>> {
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut x = images;
        for (i, &(k, b)) in self.stages.iter().enumerate() {
            if i > 0 {
                x = tape.avg_pool(x, 2)?;
            }
            let y = tape.conv2d(x, bound.var(k), Some(bound.var(b)), Padding::Same)?;
            x = tape.relu(y)?;
            outputs.push(x);
        }
        Ok(outputs)
    }
}

/// Per-entry 1×1 channel embeddings into the common bank width.
#[derive(Clone, Debug)]
pub struct BankEmbedding {
    pub embeds: Vec<(ParamId, ParamId)>,
    pub grid: usize,
    pub channels: usize,
}

impl BankEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, source_channels: &[usize], grid: usize, channels: usize) -> Self {
        let embeds = source_channels
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let w = store.add(format!("bank.embed{j}.weight"), fan_in_uniform(rng, &[1, 1, c, channels], c));
                let b = store.add(format!("bank.embed{j}.bias"), Tensor::zeros(&[channels]));
                (w, b)
            })
            .collect();
        Self { embeds, grid, channels }
    }

    pub fn len(&self) -> usize {
        self.embeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeds.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankSource {
    pub name: String,
    pub dims: Vec<usize>,
}

/// Candidate feature maps on the common `grid × grid × channels` layout, in
/// selection-logit order.
#[derive(Clone, Debug)]
pub struct LayerBank {
    pub entries: Vec<Var>,
    pub sources: Vec<BankSource>,
}

impl LayerBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Embeds each backbone output to the bank width, then average-pools
/// (larger maps) or nearest-upsamples (smaller maps) onto the grid.
pub fn build_layer_bank(tape: &mut Tape, bound: &Bound, embedding: &BankEmbedding, outputs: &[Var]) -> Result<LayerBank> {
    if outputs.is_empty() || outputs.len() != embedding.len() {
        return Err(Error::contract(format!(
            "layer bank expects {} backbone outputs, got {}",
            embedding.len(),
            outputs.len()
        )));
    }
    let s = embedding.grid;
    let mut entries = Vec::with_capacity(outputs.len());
    let mut sources = Vec::with_capacity(outputs.len());
    for (j, (&out, &(w, b))) in outputs.iter().zip(&embedding.embeds).enumerate() {
        let dims = tape.dims(out).to_vec();
        let r = dims.len();
        let (h, wd) = (dims[r - 3], dims[r - 2]);
        let e = tape.conv2d(out, bound.var(w), Some(bound.var(b)), Padding::Valid)?;
        let e = if h != wd {
            return Err(Error::shape("build_layer_bank", &dims, &[s, s]));
        } else if h == s {
            e
        } else if h > s && h % s == 0 {
            tape.avg_pool(e, h / s)?
        } else if h < s && s % h == 0 {
            tape.upsample_nearest(e, s / h)?
        } else {
            return Err(Error::shape("build_layer_bank", &dims, &[s, s]));
        };
        entries.push(e);
        sources.push(BankSource {
            name: format!("stage{j}"),
            dims,
        });
    }
    Ok(LayerBank { entries, sources })
}

/// One recurrent step of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub layer: usize,
    /// Absent when the layer is fixed by the ablation.
    pub logits: Option<Vec<f64>>,
    /// Attention map over the grid, row-major; absent without spatial
    /// attention.
    pub attention: Option<Vec<f64>>,
    /// Mean of the new hidden state.
    pub hidden_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionTrace {
    pub steps: Vec<TraceStep>,
}

/// Where Gumbel noise for the selections comes from.
#[derive(Debug)]
pub enum NoiseSource<'a> {
    /// Fresh draws, `batch · k` per step.
    Sample(&'a mut Rng),
    /// One fixed realization per step.
    Frozen(&'a [Vec<f64>]),
    /// Plain argmax of the logits.
    Noiseless,
}

impl NoiseSource<'_> {
    fn draw(&mut self, step: usize, n: usize) -> Result<Option<Vec<f64>>> {
        match self {
            Self::Sample(rng) => Ok(Some(gumbel::gumbel_noise(rng, n))),
            Self::Frozen(steps) => {
                let noise = steps
                    .get(step)
                    .ok_or_else(|| Error::contract(format!("no frozen noise for step {step}")))?;
                if noise.len() != n {
                    return Err(Error::shape("frozen noise", &[noise.len()], &[n]));
                }
                Ok(Some(noise.clone()))
            }
            Self::Noiseless => Ok(None),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSettings {
    pub mode: Mode,
    pub tau: f64,
    pub relaxation: Relaxation,
}

impl ProbeSettings {
    pub fn train(tau: f64) -> Self {
        Self {
            mode: Mode::Train,
            tau,
            relaxation: Relaxation::StraightThrough,
        }
    }

    pub fn eval(tau: f64) -> Self {
        Self {
            mode: Mode::Eval,
            tau,
            relaxation: Relaxation::StraightThrough,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOutput {
    pub hidden: Vec<Var>,
    pub traces: Vec<SelectionTrace>,
    /// Per step, the attention map `[batch, S, S, 1]`.
    pub attention: Vec<Option<Var>>,
    /// Per step, the selection logits `[batch, k]`.
    pub logits: Vec<Option<Var>>,
    /// Per step, the bank weights `[batch, k]`.
    pub weights: Vec<Option<Var>>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub prediction: Var,
    pub probe: ProbeOutput,
    pub bank: LayerBank,
}

/// Module structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: Backbone,
    pub bank: BankEmbedding,
    pub lstm: ConvLstm,
    pub attention: SpatialAttention,
    pub selector: SelectionHead,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub ablation: Ablation,
    pub n_steps: usize,
    pub aggregate_mode: AggregateMode,
    pub task: Task,
}

impl Network {
    pub fn new(config: &Config, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let t = &config.tensor;
        let backbone = Backbone::new(store, rng, m.in_channels, &m.backbone_channels);
        let bank = BankEmbedding::new(store, rng, &m.backbone_channels, m.grid, m.bank_channels);
        let lstm = ConvLstm::new(store, rng, &m.lstm_kernel_sizes, m.bank_channels, m.hidden, m.grid)?;
        let attention = SpatialAttention::new(
            store,
            rng,
            &config.attention.kernel_sizes,
            m.hidden,
            m.bank_channels,
            config.attention.activation(),
            config.attention.bn_position,
            t.conv_bias,
            t.bn_momentum,
            t.bn_epsilon,
        )?;
        let selector = SelectionHead::new(
            store,
            rng,
            m.hidden,
            m.embed_width(),
            m.bank_size(),
            m.zero_init_logits,
            t.bn_momentum,
            t.bn_epsilon,
        )?;
        let pooled = match m.aggregate_mode {
            AggregateMode::ChannelConcat => m.n_steps * m.hidden,
            AggregateMode::Flatten => m.n_steps * m.grid * m.grid * m.hidden,
        };
        let out = m.output_width();
        let head_w = store.add("head.weight", fan_in_uniform(rng, &[pooled, out], pooled));
        let mut bias = Tensor::zeros(&[out]);
        if m.task == Task::Pose {
            // identity orientation
            bias.values_mut()[3] = 1.0;
        }
        let head_b = store.add("head.bias", bias);
        Ok(Self {
            backbone,
            bank,
            lstm,
            attention,
            selector,
            head_w,
            head_b,
            ablation: m.ablation,
            n_steps: m.n_steps,
            aggregate_mode: m.aggregate_mode,
            task: m.task,
        })
    }

    /// The recurrent loop: each step selects a bank entry from the previous
    /// hidden state (unless fixed by the ablation), attends inside it and
    /// advances the Conv-LSTM.
    #[allow(clippy::too_many_arguments)]
    pub fn probe(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &mut ParamStore,
        bank: &LayerBank,
        noise: &mut NoiseSource<'_>,
        settings: ProbeSettings,
    ) -> Result<ProbeOutput> {
        let k = bank.len();
        if k == 0 || k != self.selector.bank_size {
            return Err(Error::contract(format!(
                "bank of {k} entries does not match a selector over {}",
                self.selector.bank_size
            )));
        }
        if let Ablation::SpatialOnly(j) = self.ablation {
            if j >= k {
                return Err(Error::config(format!("spatial_only({j}) out of range for {k} layers")));
            }
        }
        let edims = tape.dims(bank.entries[0]).to_vec();
        if edims.len() != 4 {
            return Err(Error::shape("probe bank", &edims, &[0, 0, 0, 0]));
        }
        let batch = edims[0];
        let cells = edims[1] * edims[2];
        let (mut h, mut c) = self.lstm.initial_state(tape, bound, batch)?;
        let mut out = ProbeOutput {
            hidden: Vec::with_capacity(self.n_steps),
            traces: vec![SelectionTrace::default(); batch],
            attention: Vec::with_capacity(self.n_steps),
            logits: Vec::with_capacity(self.n_steps),
            weights: Vec::with_capacity(self.n_steps),
        };
        for step in 0..self.n_steps {
            let (f, logits, weights) = match self.ablation {
                Ablation::SpatialOnly(j) => (bank.entries[j], None, None),
                Ablation::Joint | Ablation::LayerOnly => {
                    let logits = self.selector.logits(tape, bound, store, h, settings.mode)?;
                    let z = if k == 1 {
                        tape.constant(Tensor::full(&[batch, 1], 1.0))
                    } else {
                        let n = noise.draw(step, batch * k)?;
                        self.selector
                            .select(tape, logits, n.as_deref(), settings.tau, settings.relaxation)?
                    };
                    (tape.mix(z, &bank.entries)?, Some(logits), Some(z))
                }
            };
            let (x, attention) = match self.ablation {
                Ablation::LayerOnly => (f, None),
                _ => {
                    let (o, a) = self.attention.forward(tape, bound, store, f, h, settings.mode)?;
                    (o, Some(a))
                }
            };
            let (h_next, c_next) = self.lstm.step(tape, bound, x, h, c)?;
            h = h_next;
            c = c_next;

            let hv = tape.value(h).values();
            let per_h = hv.len() / batch;
            for (b, trace) in out.traces.iter_mut().enumerate() {
                let layer = match (self.ablation, weights) {
                    (Ablation::SpatialOnly(j), _) => j,
                    (_, Some(z)) => gumbel::argmax(&tape.value(z).values()[b * k..(b + 1) * k]),
                    _ => 0,
                };
                trace.steps.push(TraceStep {
                    layer,
                    logits: logits.map(|l| tape.value(l).values()[b * k..(b + 1) * k].to_vec()),
                    attention: attention.map(|a| tape.value(a).values()[b * cells..(b + 1) * cells].to_vec()),
                    hidden_mean: hv[b * per_h..(b + 1) * per_h].iter().sum::<f64>() / per_h as f64,
                });
            }
            out.hidden.push(h);
            out.attention.push(attention);
            out.logits.push(logits);
            out.weights.push(weights);
        }
        Ok(out)
    }

    /// Concatenates the hidden states, pools (or flattens) them and applies
    /// the dense head. Pose outputs are `[x̂ (3), q̂ (4)]` with `q̂`
    /// unnormalized.
    pub fn aggregate_predict(&self, tape: &mut Tape, bound: &Bound, hidden: &[Var]) -> Result<Var> {
        if hidden.is_empty() {
            return Err(Error::contract("aggregate_predict needs at least one hidden state"));
        }
        let pooled = match self.aggregate_mode {
            AggregateMode::ChannelConcat => {
                let cat = if hidden.len() == 1 {
                    hidden[0]
                } else {
                    tape.concat_last(hidden)?
                };
                tape.avg_pool_global(cat)?
            }
            AggregateMode::Flatten => {
                let mut flat = Vec::with_capacity(hidden.len());
                for &h in hidden {
                    let d = tape.dims(h).to_vec();
                    let dims = if d.len() == 4 {
                        vec![d[0], d[1] * d[2] * d[3]]
                    } else {
                        vec![d.iter().product()]
                    };
                    flat.push(tape.reshape(h, &dims)?);
                }
                tape.concat_last(&flat)?
            }
        };
        tape.dense(pooled, bound.var(self.head_w), Some(bound.var(self.head_b)))
    }

    /// Images `[batch, H, W, C]` to predictions `[batch, outputs]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &mut ParamStore,
        images: Var,
        noise: &mut NoiseSource<'_>,
        settings: ProbeSettings,
    ) -> Result<Forward> {
        let outputs = self.backbone.forward(tape, bound, images)?;
        let bank = build_layer_bank(tape, bound, &self.bank, &outputs)?;
        let probe = self.probe(tape, bound, store, &bank, noise, settings)?;
        let prediction = self.aggregate_predict(tape, bound, &probe.hidden)?;
        Ok(Forward { prediction, probe, bank })
    }
}

/// A configured network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    /// Validates `config` and initializes parameters from `seed`.
    pub fn new(config: Config, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed, INIT_STREAM);
        let net = Network::new(&config, &mut store, &mut rng)?;
        Ok(Self { config, net, store })
    }

    /// Binds the parameters, runs the forward pass and returns the handles.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        images: Tensor,
        noise: &mut NoiseSource<'_>,
        settings: ProbeSettings,
    ) -> Result<(Forward, Bound)> {
        let bound = self.store.bind(tape);
        let x = tape.constant(images);
        let fwd = self.net.forward(tape, &bound, &mut self.store, x, noise, settings)?;
        Ok((fwd, bound))
    }

    /// Evaluation-mode forward without gradients: noiseless argmax selection
    /// (or noise from `eval_rng` when configured) and running batch-norm
    /// statistics.
    pub fn predict(&self, images: Tensor, tau: f64, eval_rng: Option<&mut Rng>) -> Result<(Tensor, Vec<SelectionTrace>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let mut store = self.store.clone();
        let mut noise = match eval_rng {
            Some(rng) => NoiseSource::Sample(rng),
            None => NoiseSource::Noiseless,
        };
        let fwd = self
            .net
            .forward(&mut tape, &bound, &mut store, x, &mut noise, ProbeSettings::eval(tau))?;
        Ok((tape.value(fwd.prediction).clone(), fwd.probe.traces))
    }
}
