//! Run configuration: one document with `tensor`, `gumbel`, `attention`,
//! `model` and `train` sections, plus the `desk` and `paper-scale` presets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gumbel::TemperatureSchedule;
use crate::tape::Activation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub tensor: TensorConfig,
    pub gumbel: GumbelConfig,
    pub attention: AttentionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorConfig {
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// Bias terms on the attention-internal convolutions.
    pub conv_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelConfig {
    pub tau0: f64,
    pub tau_min: f64,
    /// Per optimizer step; `None` decays to `tau_min` over the whole run.
    pub decay_rate: Option<f64>,
    /// Keep Gumbel noise in evaluation-mode selection.
    pub eval_noise: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    LeakyRelu,
}

/// Where batch-norm sits inside the spatial attention path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPosition {
    /// On the single-channel score map, before the spatial softmax.
    AfterScore,
    /// On `h_att + f`, before the nonlinearity.
    BeforeNonlinearity,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub nonlinearity: Nonlinearity,
    pub leaky_slope: f64,
    pub bn_position: BnPosition,
    pub kernel_sizes: Vec<usize>,
}

impl AttentionConfig {
    pub fn activation(&self) -> Activation {
        match self.nonlinearity {
            Nonlinearity::Relu => Activation::Relu,
            Nonlinearity::LeakyRelu => Activation::LeakyRelu(self.leaky_slope),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pose,
    Class,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Layer selection and spatial attention.
    Joint,
    /// Spatial attention over one fixed bank entry.
    SpatialOnly(usize),
    /// Layer selection feeding the Conv-LSTM directly.
    LayerOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// Concatenate hidden states along channels, then global average pool.
    ChannelConcat,
    /// Flatten the stacked hidden states.
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub n_classes: usize,
    pub beta: f64,
    pub n_steps: usize,
    pub ablation: Ablation,
    pub image_size: usize,
    pub in_channels: usize,
    /// Channel width of each backbone stage; stage `i` runs at
    /// `image_size / 2^i`.
    pub backbone_channels: Vec<usize>,
    /// Common grid the bank is resampled to.
    pub grid: usize,
    /// Common channel width of the bank.
    pub bank_channels: usize,
    pub hidden: usize,
    pub lstm_kernel_sizes: Vec<usize>,
    /// Gate embedding width is `ceil(hidden / embed_ratio)`.
    pub embed_ratio: usize,
    pub aggregate_mode: AggregateMode,
    /// Zero-initialize the selection logit layer (uniform initial selection).
    pub zero_init_logits: bool,
}

impl ModelConfig {
    pub fn bank_size(&self) -> usize {
        self.backbone_channels.len()
    }

    pub fn embed_width(&self) -> usize {
        self.hidden.div_ceil(self.embed_ratio)
    }

    pub fn output_width(&self) -> usize {
        match self.task {
            Task::Pose => 7,
            Task::Class => self.n_classes,
        }
    }

    /// Spatial extent of backbone stage `i`.
    pub fn stage_size(&self, i: usize) -> usize {
        self.image_size >> i
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub clip_norm: f64,
    /// Periodic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    /// Square crop taken from each image (random in training, centered in
    /// evaluation).
    pub crop_size: usize,
    /// Random horizontal flips (classification only).
    pub hflip: bool,
}

impl Config {
    /// Desk-scale preset: 32×32 inputs, hidden width 16, batch 8. The step
    /// size and pose weight suit training from scratch in 2000 steps on
    /// scenes a few pixels across.
    pub fn desk(task: Task) -> Self {
        Self {
            tensor: TensorConfig {
                bn_momentum: 0.99,
                bn_epsilon: 1e-3,
                conv_bias: true,
            },
            gumbel: GumbelConfig {
                tau0: 1.0,
                tau_min: 0.5,
                decay_rate: None,
                eval_noise: false,
            },
            attention: AttentionConfig {
                nonlinearity: Nonlinearity::Relu,
                leaky_slope: 0.01,
                bn_position: BnPosition::AfterScore,
                kernel_sizes: vec![1, 3, 5],
            },
            model: ModelConfig {
                task,
                n_classes: 4,
                beta: 10.0,
                n_steps: match task {
                    Task::Pose => 3,
                    Task::Class => 2,
                },
                ablation: Ablation::Joint,
                image_size: 32,
                in_channels: 1,
                backbone_channels: vec![8, 16, 32, 64],
                grid: 8,
                bank_channels: 12,
                hidden: 16,
                lstm_kernel_sizes: vec![1, 3, 5, 7],
                embed_ratio: 4,
                aggregate_mode: AggregateMode::ChannelConcat,
                zero_init_logits: false,
            },
            train: TrainConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                batch_size: 8,
                epochs: 1,
                max_steps: None,
                clip_norm: 5.0,
                checkpoint_every: 0,
                crop_size: 32,
                hflip: false,
            },
        }
    }

    /// Paper-scale preset: 224×224 inputs, hidden width 96, batch 40.
    pub fn paper_scale(task: Task) -> Self {
        let mut c = Self::desk(task);
        c.model.image_size = 224;
        c.model.in_channels = 3;
        c.model.backbone_channels = vec![64, 128, 256, 512];
        c.model.grid = 28;
        c.model.bank_channels = 96;
        c.model.hidden = 96;
        c.model.n_classes = 67;
        c.train.batch_size = 40;
        c.train.crop_size = 224;
        c.train.lr = 1e-4;
        c.model.beta = 250.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: alloc::string::String| Err(Error::config(msg));
        if !(self.tensor.bn_momentum > 0.0 && self.tensor.bn_momentum < 1.0) {
            return fail(format!("tensor.bn_momentum {} outside (0,1)", self.tensor.bn_momentum));
        }
        if !(self.tensor.bn_epsilon > 0.0) {
            return fail("tensor.bn_epsilon must be positive".into());
        }
        self.schedule(1)?;
        if !(0.0..1.0).contains(&self.attention.leaky_slope) {
            return fail("attention.leaky_slope must lie in [0,1)".into());
        }
        for (key, sizes) in [
            ("attention.kernel_sizes", &self.attention.kernel_sizes),
            ("model.lstm_kernel_sizes", &m.lstm_kernel_sizes),
        ] {
            if sizes.is_empty() || sizes.iter().any(|k| k % 2 == 0) {
                return fail(format!("{key} must be a non-empty list of odd sizes"));
            }
        }
        if m.bank_channels % self.attention.kernel_sizes.len() != 0 {
            return fail(format!(
                "model.bank_channels {} not divisible by {} attention branches",
                m.bank_channels,
                self.attention.kernel_sizes.len()
            ));
        }
        if m.hidden % m.lstm_kernel_sizes.len() != 0 {
            return fail(format!(
                "model.hidden {} not divisible by {} Conv-LSTM branches",
                m.hidden,
                m.lstm_kernel_sizes.len()
            ));
        }
        if m.n_steps == 0 {
            return fail("model.n_steps must be at least 1".into());
        }
        if m.backbone_channels.is_empty() {
            return fail("model.backbone_channels must name at least one stage".into());
        }
        let last = m.backbone_channels.len() - 1;
        if m.image_size == 0 || m.image_size % (1 << last) != 0 {
            return fail(format!("model.image_size {} must be divisible by 2^{last}", m.image_size));
        }
        for i in 0..=last {
            let s = m.stage_size(i);
            if !(s % m.grid == 0 || m.grid % s == 0) {
                return fail(format!("backbone stage size {s} and model.grid {} are not commensurate", m.grid));
            }
        }
        if m.embed_ratio == 0 || m.hidden == 0 || m.in_channels == 0 {
            return fail("model widths must be positive".into());
        }
        if let Ablation::SpatialOnly(j) = m.ablation {
            if j >= m.bank_size() {
                return fail(format!("model.ablation spatial_only({j}) out of range for {} layers", m.bank_size()));
            }
        }
        match m.task {
            Task::Pose => {
                if !(m.beta > 0.0) {
                    return fail("model.beta must be positive for the pose task".into());
                }
            }
            Task::Class => {
                if m.n_classes < 2 {
                    return fail("model.n_classes must be at least 2".into());
                }
            }
        }
        let t = &self.train;
        if !(t.lr > 0.0) || !(t.adam_eps > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return fail("train ADAM hyper-parameters out of range".into());
        }
        if t.batch_size == 0 {
            return fail("train.batch_size must be positive".into());
        }
        if !(t.clip_norm > 0.0) {
            return fail("train.clip_norm must be positive".into());
        }
        if t.crop_size != m.image_size {
            return fail(format!(
                "train.crop_size {} must equal model.image_size {}",
                t.crop_size, m.image_size
            ));
        }
        Ok(())
    }

    /// Temperature schedule for a run of `total_steps` optimizer steps.
    pub fn schedule(&self, total_steps: u64) -> Result<TemperatureSchedule> {
        match self.gumbel.decay_rate {
            Some(rate) => TemperatureSchedule::new(self.gumbel.tau0, self.gumbel.tau_min, rate),
            None => TemperatureSchedule::spanning(self.gumbel.tau0, self.gumbel.tau_min, total_steps),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for task in [Task::Pose, Task::Class] {
            Config::desk(task).validate().unwrap();
            Config::paper_scale(task).validate().unwrap();
        }
        let desk = Config::desk(Task::Pose);
        assert_eq!(desk.tensor.bn_momentum, 0.99);
        assert_eq!(desk.tensor.bn_epsilon, 1e-3);
        assert_eq!(desk.model.embed_width(), 4);
        assert_eq!(Config::paper_scale(Task::Pose).model.hidden, 96);
        assert_eq!(Config::paper_scale(Task::Pose).model.embed_width(), 24);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut c = Config::desk(Task::Pose);
        c.model.ablation = Ablation::SpatialOnly(4);
        assert!(c.validate().is_err());
        let mut c = Config::desk(Task::Pose);
        c.model.bank_channels = 16;
        assert!(c.validate().is_err());
        let mut c = Config::desk(Task::Pose);
        c.attention.kernel_sizes = vec![1, 2];
        assert!(c.validate().is_err());
        let mut c = Config::desk(Task::Class);
        c.model.n_classes = 1;
        assert!(c.validate().is_err());
    }
}
