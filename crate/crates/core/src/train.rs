//! Training loop and evaluation.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::config::Config;
use crate::data::{preprocess, stack, Dataset};
use crate::error::{Error, Result};
use crate::gumbel::TemperatureSchedule;
use crate::loss::task_loss;
use crate::metrics::{median_metrics, Metrics};
use crate::model::{Model, NoiseSource, ProbeSettings, SelectionTrace};
use crate::ops::Mode;
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tape::Tape;

const SHUFFLE_STREAM: u64 = 0x5A1F;
const CROP_STREAM: u64 = 0xC409;
const GUMBEL_STREAM: u64 = 0x6B1E;
const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub tau: f64,
    /// Clipping events so far, including this step.
    pub clip_events: u64,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub model: Model,
    pub adam: AdamState,
    /// Optimizer steps completed.
    pub step: u64,
    pub clip_events: u64,
    /// Seed of the data order, crops and Gumbel noise.
    pub seed: u64,
    /// Per-channel training mean used by preprocessing.
    pub mean: Vec<f64>,
}

impl TrainingState {
    /// Fresh model and optimizer; parameters are initialized from `seed`.
    pub fn new(config: Config, seed: u64, mean: Vec<f64>) -> Result<Self> {
        let model = Model::new(config, seed)?;
        let t = &model.config.train;
        let adam = AdamState::new(
            AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
            },
            &model.store,
        );
        Ok(Self {
            model,
            adam,
            step: 0,
            clip_events: 0,
            seed,
            mean,
        })
    }
}

/// Receives each step's log and the periodic checkpoints.
pub trait Observer {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainingState) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct Silent;

impl Observer for Silent {}

/// Collects step logs in memory.
#[derive(Default)]
pub struct Recorder {
    pub logs: Vec<StepLog>,
}

impl Observer for Recorder {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        self.logs.push(*log);
        Ok(())
    }
}

pub fn batches_per_epoch(examples: usize, batch_size: usize) -> u64 {
    examples.div_ceil(batch_size) as u64
}

/// Optimizer steps in a full run.
pub fn total_steps(config: &Config, examples: usize) -> u64 {
    let all = config.train.epochs * batches_per_epoch(examples, config.train.batch_size);
    config.train.max_steps.map_or(all, |m| m.min(all))
}

/// Dataset indices of the examples making up optimizer step `step`.
pub fn batch_indices(seed: u64, examples: usize, batch_size: usize, step: u64) -> Vec<usize> {
    let per_epoch = batches_per_epoch(examples, batch_size);
    let (epoch, b) = (step / per_epoch, (step % per_epoch) as usize);
    let mut order: Vec<usize> = (0..examples).collect();
    Rng::new(seed, SHUFFLE_STREAM).split(epoch).shuffle(&mut order);
    let end = ((b + 1) * batch_size).min(examples);
    order[b * batch_size..end].to_vec()
}

fn check_task(config: &Config, dataset: &Dataset) -> Result<()> {
    if config.model.task != dataset.task {
        return Err(Error::config(format!(
            "model trained for {:?} cannot use a {:?} dataset",
            config.model.task, dataset.task
        )));
    }
    if dataset.channels() != config.model.in_channels {
        return Err(Error::config(format!(
            "dataset has {} channels, model.in_channels is {}",
            dataset.channels(),
            config.model.in_channels
        )));
    }
    Ok(())
}

/// One optimizer step on the batch for `state.step`.
pub fn train_step(state: &mut TrainingState, dataset: &Dataset, schedule: &TemperatureSchedule) -> Result<StepLog> {
    let step = state.step;
    let cfg = state.model.config.clone();
    let ids = batch_indices(state.seed, dataset.len(), cfg.train.batch_size, step);
    let mut crop_rng = Rng::new(state.seed, CROP_STREAM).split(step);
    let mut gumbel_rng = Rng::new(state.seed, GUMBEL_STREAM).split(step);
    let hflip = cfg.train.hflip && cfg.model.task == crate::config::Task::Class;
    let images = ids
        .iter()
        .map(|&i| {
            preprocess(
                &dataset.examples[i].image,
                &state.mean,
                cfg.train.crop_size,
                Mode::Train,
                hflip,
                Some(&mut crop_rng),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<_> = ids.iter().map(|&i| dataset.examples[i].label).collect();
    let tau = schedule.anneal(step);

    let mut tape = Tape::new();
    let (fwd, bound) = state.model.forward(
        &mut tape,
        stack(&images)?,
        &mut NoiseSource::Sample(&mut gumbel_rng),
        ProbeSettings::train(tau),
    )?;
    let loss = task_loss(&mut tape, fwd.prediction, &labels, cfg.model.beta)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, example_ids: ids });
    }
    let mut grads = tape.backward(loss)?;
    state.model.store.store_grads(&bound, &mut grads)?;
    let (_, clipped) = clip_global_norm(&mut state.model.store, cfg.train.clip_norm)?;
    if clipped {
        state.clip_events += 1;
    }
    adam_step(&mut state.model.store, &mut state.adam)?;
    state.model.store.clear_grads();
    state.step += 1;
    Ok(StepLog {
        step,
        loss: value,
        tau,
        clip_events: state.clip_events,
    })
}

/// Runs (or continues) training until the configured number of steps.
pub fn train(state: &mut TrainingState, dataset: &Dataset, observer: &mut dyn Observer) -> Result<()> {
    let cfg = state.model.config.clone();
    cfg.validate()?;
    check_task(&cfg, dataset)?;
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let total = total_steps(&cfg, dataset.len());
    let schedule = cfg.schedule(total)?;
    while state.step < total {
        let log = train_step(state, dataset, &schedule)?;
        observer.on_step(&log)?;
        let every = cfg.train.checkpoint_every;
        if every > 0 && state.step % every == 0 {
            observer.on_checkpoint(state)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Vec<f64>>,
    pub traces: Vec<SelectionTrace>,
}

/// Fixed evaluation chunks; results do not depend on how chunks are
/// scheduled.
pub fn eval_chunks(examples: usize, batch_size: usize) -> Vec<Range<usize>> {
    (0..examples.div_ceil(batch_size))
        .map(|i| i * batch_size..((i + 1) * batch_size).min(examples))
        .collect()
}

/// Predictions and traces for one evaluation chunk.
pub fn predict_chunk(
    model: &Model,
    dataset: &Dataset,
    mean: &[f64],
    chunk: Range<usize>,
    chunk_index: usize,
    eval_seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<SelectionTrace>)> {
    let cfg = &model.config;
    let images = dataset.examples[chunk]
        .iter()
        .map(|e| preprocess(&e.image, mean, cfg.train.crop_size, Mode::Eval, false, None))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = Rng::new(eval_seed, EVAL_STREAM).split(chunk_index as u64);
    let noise = cfg.gumbel.eval_noise.then_some(&mut rng);
    let (pred, traces) = model.predict(stack(&images)?, cfg.gumbel.tau_min, noise)?;
    let width = pred.dims()[1];
    Ok((pred.values().chunks(width).map(<[f64]>::to_vec).collect(), traces))
}

/// Assembles chunk results (in chunk order) into metrics.
pub fn finish_evaluation(dataset: &Dataset, chunks: Vec<(Vec<Vec<f64>>, Vec<SelectionTrace>)>) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut traces = Vec::with_capacity(dataset.len());
    for (p, t) in chunks {
        predictions.extend(p);
        traces.extend(t);
    }
    let metrics = median_metrics(&predictions, &dataset.labels())?;
    Ok(Evaluation {
        metrics,
        predictions,
        traces,
    })
}

/// Evaluation-mode metrics over `dataset`, preprocessed with the training
/// `mean`.
pub fn evaluate(model: &Model, dataset: &Dataset, mean: &[f64], eval_seed: u64) -> Result<Evaluation> {
    check_task(&model.config, dataset)?;
    if dataset.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let chunks = eval_chunks(dataset.len(), model.config.train.batch_size)
        .into_iter()
        .enumerate()
        .map(|(i, r)| predict_chunk(model, dataset, mean, r, i, eval_seed))
        .collect::<Result<Vec<_>>>()?;
    finish_evaluation(dataset, chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::small_config;
    use crate::config::Task;
    use crate::data::{synthesize, SynthConfig};

    fn tiny(task: Task) -> (Config, Dataset) {
        let mut c = small_config(task);
        c.train.batch_size = 4;
        c.train.epochs = 1;
        c.train.lr = 1e-3;
        let mut s = SynthConfig::new(task, 10, 5);
        s.image_size = c.model.image_size;
        (c, synthesize(&s).unwrap())
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(9, 10, 4, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(9, 10, 4, 2).len(), 2);
        assert_ne!(batch_indices(9, 10, 4, 0), batch_indices(9, 10, 4, 3));
    }

    #[test]
    fn logs_and_schedule() {
        let (mut c, d) = tiny(Task::Pose);
        c.train.epochs = 2;
        let mut st = TrainingState::new(c, 1, d.mean.clone()).unwrap();
        let mut rec = Recorder::default();
        train(&mut st, &d, &mut rec).unwrap();
        assert_eq!(rec.logs.len(), 6);
        assert!(rec.logs.windows(2).all(|w| w[1].tau <= w[0].tau && w[1].step == w[0].step + 1));
        assert!(rec.logs.iter().all(|l| l.loss.is_finite()));
        assert_eq!(st.adam.t, 6);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut c, d) = tiny(Task::Class);
        c.train.epochs = 3;
        let mut full = TrainingState::new(c.clone(), 2, d.mean.clone()).unwrap();
        train(&mut full, &d, &mut Silent).unwrap();

        let mut part = TrainingState::new(c.clone(), 2, d.mean.clone()).unwrap();
        let total = total_steps(&c, d.len());
        let schedule = c.schedule(total).unwrap();
        for _ in 0..4 {
            train_step(&mut part, &d, &schedule).unwrap();
        }
        let mut resumed = part.clone();
        train(&mut resumed, &d, &mut Silent).unwrap();
        assert_eq!(resumed.model.store, full.model.store);
        assert_eq!(resumed.adam, full.adam);
    }

    #[test]
    fn task_mismatch_is_a_config_error() {
        let (c, _) = tiny(Task::Pose);
        let (_, class_data) = tiny(Task::Class);
        let model = Model::new(c, 0).unwrap();
        assert!(matches!(evaluate(&model, &class_data, &[0.0], 0), Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_is_deterministic_and_chunk_invariant() {
        let (c, d) = tiny(Task::Class);
        let model = Model::new(c, 4).unwrap();
        let a = evaluate(&model, &d, &d.mean, 0).unwrap();
        let b = evaluate(&model, &d, &d.mean, 0).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.traces.len(), d.len());
        let mut single = model.clone();
        single.config.train.batch_size = 1;
        let s = evaluate(&single, &d, &d.mean, 0).unwrap();
        for (x, y) in s.predictions.iter().zip(&a.predictions) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_loss_reports_the_batch() {
        let (c, d) = tiny(Task::Pose);
        let mut st = TrainingState::new(c, 1, d.mean.clone()).unwrap();
        let id = st.model.store.find("head.bias").unwrap();
        st.model.store.get_mut(id).values_mut()[0] = f64::NAN;
        let err = train(&mut st, &d, &mut Silent).unwrap_err();
        let Error::NonFiniteLoss { step, example_ids } = err else { panic!("{err:?}") };
        assert_eq!(step, 0);
        assert_eq!(example_ids, batch_indices(1, d.len(), 4, 0));
    }
}
