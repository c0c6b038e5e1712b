//! Run directories: `config.json`, `checkpoints/`, `metrics.csv`,
//! `traces.csv` and `reports/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lsattn_core::data::Dataset;
use lsattn_core::model::{Model, SelectionTrace};
use lsattn_core::train::{eval_chunks, finish_evaluation, predict_chunk, Evaluation, StepLog};
use lsattn_core::Config;

use crate::error::{CliError, CliResult};
use crate::settings;

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub struct RunDir {
    pub root: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn traces_path(&self) -> PathBuf {
        self.root.join("traces.csv")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// True when the directory exists and holds anything.
    pub fn is_populated(&self) -> bool {
        fs::read_dir(&self.root).map(|mut d| d.next().is_some()).unwrap_or(false)
    }

    pub fn create(&self) -> CliResult<()> {
        for dir in [self.root.clone(), self.checkpoints(), self.reports()] {
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        Ok(())
    }

    pub fn write_config(&self, config: &Config) -> CliResult<()> {
        let p = self.config_path();
        fs::write(&p, settings::to_json(config)).map_err(|e| io_err(&p, e))
    }

    pub fn read_config(&self) -> CliResult<Config> {
        let p = self.config_path();
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:06}.ckpt"))
    }

    /// `NAME`, `NAME.ckpt` or a path, resolved inside `checkpoints/`.
    pub fn resolve_checkpoint(&self, name: Option<&str>) -> CliResult<PathBuf> {
        let name = name.unwrap_or(FINAL_CHECKPOINT);
        let candidates = [
            self.checkpoints().join(name),
            self.checkpoints().join(format!("{name}.ckpt")),
            PathBuf::from(name),
        ];
        candidates
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| CliError::usage(format!("no checkpoint {name:?} in {}", self.checkpoints().display())))
    }

    /// The final checkpoint if present, otherwise the latest periodic one.
    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        let fin = self.checkpoints().join(FINAL_CHECKPOINT);
        if fin.is_file() {
            return Some(fin);
        }
        let mut steps: Vec<PathBuf> = fs::read_dir(self.checkpoints())
            .ok()?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("step_") && n.ends_with(".ckpt")))
            .collect();
        steps.sort();
        steps.pop()
    }
}

pub const METRICS_HEADER: &str = "step,loss,tau,clip_events";

pub fn metrics_line(log: &StepLog) -> String {
    format!("{},{},{},{}", log.step, log.loss, log.tau, log.clip_events)
}

/// Keeps the header and the rows for steps before `step`.
pub fn truncate_metrics(path: &Path, step: u64) -> CliResult<()> {
    let text = fs::read_to_string(path).unwrap_or_else(|_| format!("{METRICS_HEADER}\n"));
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn write_traces(path: &Path, traces: &[SelectionTrace], k: usize) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut header = vec!["example_id".to_string(), "step".into(), "selected_layer".into()];
    header.extend((0..k).map(|j| format!("logit_{j}")));
    w.write_record(&header).map_err(|e| CliError::usage(e.to_string()))?;
    for (id, t) in traces.iter().enumerate() {
        for (s, step) in t.steps.iter().enumerate() {
            let mut row = vec![id.to_string(), (s + 1).to_string(), step.layer.to_string()];
            match &step.logits {
                Some(l) => row.extend(l.iter().map(f64::to_string)),
                None => row.extend((0..k).map(|_| String::new())),
            }
            w.write_record(&row).map_err(|e| CliError::usage(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Selected layer per recorded step, grouped by example.
pub fn read_traces(path: &Path) -> CliResult<Vec<SelectionTrace>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut traces: Vec<SelectionTrace> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let bad = |msg: &str| CliError::usage(format!("{}:{}: {msg}", path.display(), i + 2));
        let rec = rec.map_err(|e| bad(&e.to_string()))?;
        let field = |j: usize| rec.get(j).and_then(|s| s.parse::<usize>().ok());
        let (Some(id), Some(layer)) = (field(0), field(2)) else {
            return Err(bad("expected example_id and selected_layer"));
        };
        if traces.len() <= id {
            traces.resize_with(id + 1, SelectionTrace::default);
        }
        traces[id].steps.push(lsattn_core::model::TraceStep {
            layer,
            logits: None,
            attention: None,
            hidden_mean: 0.0,
        });
    }
    Ok(traces)
}

/// Evaluation split into fixed chunks spread over `threads` workers; the
/// result does not depend on the thread count.
pub fn evaluate_parallel(model: &Model, dataset: &Dataset, mean: &[f64], seed: u64, threads: usize) -> CliResult<Evaluation> {
    if model.config.model.task != dataset.task {
        return Ok(lsattn_core::train::evaluate(model, dataset, mean, seed)?);
    }
    let chunks = eval_chunks(dataset.len(), model.config.train.batch_size);
    let threads = threads.clamp(1, chunks.len().max(1));
    if threads == 1 {
        return Ok(lsattn_core::train::evaluate(model, dataset, mean, seed)?);
    }
    let mut results: Vec<Option<lsattn_core::Result<_>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let chunks = &chunks;
                scope.spawn(move || {
                    (w..chunks.len())
                        .step_by(threads)
                        .map(|i| (i, predict_chunk(model, dataset, mean, chunks[i].clone(), i, seed)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let parts = results
        .into_iter()
        .map(|r| r.expect("every chunk evaluated"))
        .collect::<lsattn_core::Result<Vec<_>>>()?;
    Ok(finish_evaluation(dataset, parts)?)
}

/// Buffered CSV appender for step logs.
pub struct MetricsWriter {
    file: std::io::BufWriter<fs::File>,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> CliResult<Self> {
        let exists = path.is_file();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        let mut w = Self {
            file: std::io::BufWriter::new(file),
        };
        if !exists {
            w.line(METRICS_HEADER)?;
        }
        Ok(w)
    }

    pub fn line(&mut self, line: &str) -> CliResult<()> {
        writeln!(self.file, "{line}").map_err(|e| CliError::usage(e.to_string()))
    }

    pub fn flush(&mut self) -> CliResult<()> {
        self.file.flush().map_err(|e| CliError::usage(e.to_string()))
    }
}
