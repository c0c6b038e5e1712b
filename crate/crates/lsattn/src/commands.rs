//! One function per subcommand. Each writes its report to `out` and returns
//! a [`CliError`] carrying the exit code on failure.

use std::fs;
use std::io::Write;
use std::path::Path;

use lsattn_core::checks::run_suite;
use lsattn_core::config::{Ablation, Task};
use lsattn_core::data::{preprocess, stack, synthesize, Signal, Split, SynthConfig};
use lsattn_core::metrics::lsf_histogram;
use lsattn_core::train::{self, Observer, StepLog, TrainingState};
use lsattn_core::{Error, Mode};

use crate::checkpoint;
use crate::error::{CliError, CliResult};
use crate::heatmap;
use crate::manifest::{load_dataset, write_dataset};
use crate::pnm;
use crate::run::{evaluate_parallel, truncate_metrics, write_traces, MetricsWriter, RunDir, FINAL_CHECKPOINT};
use crate::settings;

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::usage(format!("stdout: {e}")))
}

pub struct SynthArgs<'a> {
    pub task: Task,
    pub out: &'a Path,
    pub n: usize,
    pub seed: u64,
    pub signal: Signal,
    pub split: Split,
    pub size: usize,
    pub classes: usize,
}

pub fn synth(args: &SynthArgs<'_>, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    if args.n == 0 {
        let _ = writeln!(err, "warning: --n 0 writes an empty manifest");
    }
    let mut cfg = SynthConfig::new(args.task, args.n, args.seed);
    cfg.signal = args.signal;
    cfg.split = args.split;
    cfg.image_size = args.size;
    cfg.n_classes = args.classes;
    let dataset = synthesize(&cfg)?;
    write_dataset(args.out, &dataset)?;
    say(out, format!("wrote {} entries to {}", dataset.len(), args.out.display()))
}

struct RunObserver<'a> {
    run: &'a RunDir,
    metrics: MetricsWriter,
}

impl RunObserver<'_> {
    fn lift(e: CliError) -> Error {
        Error::Contract(e.message)
    }
}

impl Observer for RunObserver<'_> {
    fn on_step(&mut self, log: &StepLog) -> lsattn_core::Result<()> {
        self.metrics.line(&crate::run::metrics_line(log)).map_err(Self::lift)
    }

    fn on_checkpoint(&mut self, state: &TrainingState) -> lsattn_core::Result<()> {
        self.metrics.flush().map_err(Self::lift)?;
        checkpoint::save(&self.run.step_checkpoint(state.step), state)
            .map(|_| ())
            .map_err(Self::lift)
    }
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub seed: u64,
    pub resume: bool,
    pub threads: usize,
}

/// Only these settings may change when a run is resumed.
fn resumable_change(old: &lsattn_core::Config, new: &lsattn_core::Config) -> bool {
    let mut a = old.clone();
    a.train.epochs = new.train.epochs;
    a.train.max_steps = new.train.max_steps;
    a.train.checkpoint_every = new.train.checkpoint_every;
    a == *new
}

pub fn train(args: &TrainArgs<'_>, out: &mut dyn Write) -> CliResult<()> {
    let data = load_dataset(args.data)?;
    let run = RunDir::new(args.out);
    let mut state = if run.is_populated() {
        if !args.resume {
            return Err(CliError::usage(format!(
                "run directory {} is not empty; pass --resume to continue it",
                run.root.display()
            )));
        }
        let ckpt = run
            .latest_checkpoint()
            .ok_or_else(|| CliError::usage(format!("nothing to resume in {}", run.checkpoints().display())))?;
        let mut state = checkpoint::load(&ckpt)?;
        if let Some(path) = args.config {
            let cfg = settings::load_config(path, data.task)?;
            if !resumable_change(&state.model.config, &cfg) {
                return Err(CliError::usage(
                    "resumed config may only change train.epochs, train.max_steps and train.checkpoint_every",
                ));
            }
            state.model.config = cfg;
        }
        say(out, format!("resuming from {} at step {}", ckpt.display(), state.step))?;
        truncate_metrics(&run.metrics_path(), state.step)?;
        state
    } else {
        let cfg = match args.config {
            Some(path) => settings::load_config(path, data.task)?,
            None => settings::preset("desk", data.task)?,
        };
        run.create()?;
        TrainingState::new(cfg, args.seed, data.mean.clone())?
    };
    run.write_config(&state.model.config)?;

    let mut obs = RunObserver {
        run: &run,
        metrics: MetricsWriter::append(&run.metrics_path())?,
    };
    let result = train::train(&mut state, &data, &mut obs);
    obs.metrics.flush()?;
    if let Err(e) = result {
        if let Error::NonFiniteLoss { step, example_ids } = &e {
            let mut dump = format!("non-finite loss at step {step}\n");
            for &i in example_ids {
                dump.push_str(&format!("{i} {}\n", data.examples[i].path));
            }
            let path = run.reports().join("nonfinite_batch.txt");
            let _ = fs::write(&path, &dump);
            return Err(CliError {
                code: crate::error::EXIT_NUMERIC,
                message: format!("{e}; batch written to {}", path.display()),
            });
        }
        return Err(e.into());
    }
    let digest = checkpoint::save(&run.checkpoints().join(FINAL_CHECKPOINT), &state)?;
    let eval = evaluate_parallel(&state.model, &data, &state.mean, state.seed, args.threads)?;
    write_traces(&run.traces_path(), &eval.traces, state.model.config.model.bank_size())?;
    say(out, format!("steps={}", state.step))?;
    say(out, format!("clip_events={}", state.clip_events))?;
    say(out, format!("checkpoint_sha256={digest}"))
}

fn print_metrics(out: &mut dyn Write, eval: &train::Evaluation) -> CliResult<()> {
    for (k, v) in eval.metrics.entries() {
        say(out, format!("{k}={v}"))?;
    }
    Ok(())
}

pub fn eval(run_dir: &Path, data: &Path, checkpoint_name: Option<&str>, threads: usize, out: &mut dyn Write) -> CliResult<()> {
    let run = RunDir::new(run_dir);
    let path = run.resolve_checkpoint(checkpoint_name)?;
    let (model, mean, seed) = checkpoint::load_model(&path)?;
    let data = load_dataset(data)?;
    let eval = evaluate_parallel(&model, &data, &mean, seed, threads)?;
    write_traces(&run.traces_path(), &eval.traces, model.config.model.bank_size())?;
    print_metrics(out, &eval)
}

pub fn report_lsf(run_dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let run = RunDir::new(run_dir);
    let k = run.read_config()?.model.bank_size();
    let traces = crate::run::read_traces(&run.traces_path())?;
    if traces.iter().all(|t| t.steps.is_empty()) {
        return Err(CliError::usage(format!("{} holds no traces", run.traces_path().display())));
    }
    let hist = lsf_histogram(&traces, k)?;
    fs::create_dir_all(run.reports()).map_err(|e| CliError::usage(e.to_string()))?;
    let mut csv = String::from("layer,percent\n");
    for (j, p) in hist.iter().enumerate() {
        csv.push_str(&format!("{j},{p}\n"));
        let bar = "#".repeat((p / 2.0).round() as usize);
        say(out, format!("layer {j} |{bar:<50}| {p:6.2}%"))?;
    }
    let path = run.reports().join("lsf.csv");
    fs::write(&path, csv).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn heatmaps(run_dir: &Path, data: &Path, example: usize, checkpoint_name: Option<&str>, out: &mut dyn Write) -> CliResult<()> {
    let run = RunDir::new(run_dir);
    let (model, mean, _) = checkpoint::load_model(&run.resolve_checkpoint(checkpoint_name)?)?;
    let data = load_dataset(data)?;
    let ex = data
        .examples
        .get(example)
        .ok_or_else(|| CliError::usage(format!("example {example} not in a dataset of {}", data.len())))?;
    if model.config.model.ablation == Ablation::LayerOnly {
        return Err(CliError::usage("layer_only runs have no spatial attention"));
    }
    let crop = model.config.train.crop_size;
    let input = preprocess(&ex.image, &mean, crop, Mode::Eval, false, None)?;
    let (_, traces) = model.predict(stack(&[input])?, model.config.gumbel.tau_min, None)?;

    // center crop of the raw image, averaged over channels
    let (top, left) = ((ex.image.height - crop) / 2, (ex.image.width - crop) / 2);
    let gray: Vec<u8> = (0..crop * crop)
        .map(|i| {
            let (r, c) = (top + i / crop, left + i % crop);
            let sum: u32 = (0..ex.image.channels).map(|ch| u32::from(ex.image.at(r, c, ch))).sum();
            (f64::from(sum) / ex.image.channels as f64).round() as u8
        })
        .collect();
    let grid = model.config.model.grid;
    let reports = run.reports();
    fs::create_dir_all(&reports).map_err(|e| CliError::usage(e.to_string()))?;
    for (t, step) in traces[0].steps.iter().enumerate() {
        let map = step.attention.as_ref().expect("spatial attention recorded");
        let heat = heatmap::normalize(&heatmap::upsample_bilinear(map, grid, crop));
        let blend = heatmap::overlay(&gray, &heat);
        let stem = format!("step{}_layer{}", t + 1, step.layer);
        for (kind, pixels) in [("heatmap", heat), ("overlay", blend)] {
            let path = reports.join(format!("{kind}_{stem}.pgm"));
            pnm::write(&path, &lsattn_core::data::Image::gray(crop, crop, pixels)?)?;
            say(out, path.display().to_string())?;
        }
    }
    Ok(())
}

pub fn gradcheck(seed: u64, corrupt: Option<&str>, out: &mut dyn Write) -> CliResult<()> {
    let results = run_suite(seed, corrupt)?;
    say(out, "op,max_rel_err,threshold,pass")?;
    let mut failed = Vec::new();
    for r in &results {
        say(out, format!("{},{:.3e},{:.0e},{}", r.op, r.max_rel_err(), r.threshold, r.passed()))?;
        if !r.passed() {
            failed.push(r.op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::check(format!("gradient check failed: {}", failed.join(", "))))
    }
}
