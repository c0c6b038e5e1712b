use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lsattn::checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_lsattn");

const TINY: &str = r#"{
  "model": {"image_size": 16, "backbone_channels": [4, 6, 8], "grid": 4, "bank_channels": 6,
            "hidden": 8, "lstm_kernel_sizes": [1, 3]},
  "attention": {"kernel_sizes": [1, 3]},
  "train": {"crop_size": 16, "epochs": 2, "batch_size": 4}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    /// Writes `TINY` with `patch` merged into the given section.
    fn config(&self, name: &str, section: &str, patch: &str) -> String {
        let mut doc: serde_json::Value = serde_json::from_str(TINY).unwrap();
        let extra: serde_json::Value = serde_json::from_str(patch).unwrap();
        for (k, v) in extra.as_object().unwrap() {
            doc[section][k] = v.clone();
        }
        fs::write(self.path(name), doc.to_string()).unwrap();
        self.s(name)
    }

    fn synth(&self, name: &str, task: &str, n: usize, seed: u64) {
        let o = run(&[
            "synth", "--task", task, "--out", &self.s(name), "--n", &n.to_string(), "--seed", &seed.to_string(), "--size", "16",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }

    fn train(&self, config: &str, data: &str, out: &str) -> Output {
        run(&["train", "--config", config, "--data", &self.s(data), "--out", &self.s(out), "--seed", "1"])
    }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let w = Workspace::new();
    let o = run(&["synth", "--task", "pose", "--out", &w.s("d1"), "--n", "100", "--seed", "7"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("100 entries"));
    let listing = files(&w.path("d1"));
    assert_eq!(listing.len(), 101);
    let manifest = fs::read_to_string(w.path("d1/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 100);
    run(&["synth", "--task", "pose", "--out", &w.s("d2"), "--n", "100", "--seed", "7"]);
    assert_eq!(listing, files(&w.path("d2")));
}

#[test]
fn synth_edge_cases() {
    let w = Workspace::new();
    let o = run(&["synth", "--task", "class", "--out", &w.s("empty"), "--n", "0"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
    assert_eq!(fs::read_to_string(w.path("empty/manifest.txt")).unwrap().lines().count(), 3);

    fs::write(w.path("blocker"), b"").unwrap();
    let o = run(&["synth", "--task", "pose", "--out", &w.s("blocker/sub"), "--n", "2"]);
    assert!(!o.status.success());
    assert!(!stderr(&o).is_empty());
}

#[test]
fn train_eval_and_reports() {
    let w = Workspace::new();
    w.synth("train", "pose", 12, 1);
    w.synth("test", "pose", 6, 2);
    let cfg = w.config("cfg.json", "model", r#"{"n_steps": 3}"#);
    let o = w.train(&cfg, "train", "run");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "metrics.csv", "traces.csv", "checkpoints/final.ckpt"] {
        assert!(w.path("run").join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(w.path("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss,tau,clip_events"));
    assert_eq!(metrics.lines().count(), 1 + 6);

    let e1 = run(&["eval", "--run", &w.s("run"), "--data", &w.s("test")]);
    assert!(e1.status.success(), "{}", stderr(&e1));
    let lines: Vec<String> = stdout(&e1).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("median_position=") && lines[1].starts_with("median_orientation_deg="));
    for l in &lines {
        assert!(l.split('=').nth(1).unwrap().parse::<f64>().unwrap().is_finite());
    }
    let e2 = run(&["eval", "--run", &w.s("run"), "--data", &w.s("test")]);
    assert_eq!(stdout(&e1), stdout(&e2));

    let missing = run(&["eval", "--run", &w.s("run"), "--data", &w.s("test"), "--checkpoint", "nope"]);
    assert_eq!(missing.status.code(), Some(2));

    let lsf = run(&["report-lsf", "--run", &w.s("run")]);
    assert!(lsf.status.success());
    assert_eq!(stdout(&lsf).lines().count(), 3);
    let table = fs::read_to_string(w.path("run/reports/lsf.csv")).unwrap();
    let total: f64 = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 100.0).abs() <= 1e-9);

    let heat = run(&["heatmaps", "--run", &w.s("run"), "--data", &w.s("test"), "--example", "1"]);
    assert!(heat.status.success(), "{}", stderr(&heat));
    let names: Vec<String> = fs::read_dir(w.path("run/reports"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("heatmap_step")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.starts_with("overlay_step")).count(), 3);
    let bad = run(&["heatmaps", "--run", &w.s("run"), "--data", &w.s("test"), "--example", "99"]);
    assert_eq!(bad.status.code(), Some(2));

    // appending to an existing run needs --resume
    let again = w.train(&cfg, "train", "run");
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--resume"));
}

#[test]
fn class_eval_prints_accuracy() {
    let w = Workspace::new();
    w.synth("train", "class", 8, 1);
    let cfg = w.config("cfg.json", "train", r#"{"epochs": 1}"#);
    assert!(w.train(&cfg, "train", "run").status.success());
    let o = run(&["eval", "--run", &w.s("run"), "--data", &w.s("train")]);
    let out = stdout(&o);
    let value: f64 = out.trim().strip_prefix("mean_accuracy=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&value));
    assert_eq!(out.lines().count(), 1);
}

#[test]
fn fixed_layer_ablation_shows_in_traces() {
    let w = Workspace::new();
    w.synth("train", "pose", 8, 3);
    let cfg = w.config("cfg.json", "model", r#"{"ablation": {"spatial_only": 2}}"#);
    assert!(w.train(&cfg, "train", "run").status.success());
    let traces = fs::read_to_string(w.path("run/traces.csv")).unwrap();
    let mut rows = traces.lines().skip(1).peekable();
    assert!(rows.peek().is_some());
    assert!(rows.all(|r| r.split(',').nth(2) == Some("2")));
    let lsf = run(&["report-lsf", "--run", &w.s("run")]);
    assert!(stdout(&lsf).contains("100.00%"));
    let table = fs::read_to_string(w.path("run/reports/lsf.csv")).unwrap();
    assert!(table.contains("2,100\n"));
}

#[test]
fn config_errors_name_the_field() {
    let w = Workspace::new();
    w.synth("train", "pose", 4, 1);
    let cfg = w.config("cfg.json", "train", r#"{"epoch": 1}"#);
    let o = w.train(&cfg, "train", "run");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
    assert!(!w.path("run").exists());
}

#[test]
fn non_finite_loss_exits_three() {
    let w = Workspace::new();
    w.synth("train", "pose", 8, 1);
    let cfg = w.config("cfg.json", "train", r#"{"lr": 1e300, "clip_norm": 1e300}"#);
    let o = w.train(&cfg, "train", "run");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss"));
    let dump = fs::read_to_string(w.path("run/reports/nonfinite_batch.txt")).unwrap();
    assert!(dump.contains("img/"));
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let w = Workspace::new();
    w.synth("train", "pose", 4, 1);
    let cfg = w.config("cfg.json", "train", r#"{"epochs": 0}"#);
    assert!(w.train(&cfg, "train", "run").status.success());
    assert_eq!(fs::read_to_string(w.path("run/metrics.csv")).unwrap().lines().count(), 1);
    let state = checkpoint::load(&w.path("run/checkpoints/final.ckpt")).unwrap();
    let fresh = lsattn_core::Model::new(state.model.config.clone(), 1).unwrap();
    assert_eq!(state.model.store, fresh.store);
}

#[test]
fn resumed_run_matches_one_shot_run() {
    let w = Workspace::new();
    w.synth("train", "class", 10, 4);
    let cfg = w.config("cfg.json", "train", r#"{"epochs": 10, "max_steps": 8, "checkpoint_every": 4}"#);
    assert!(w.train(&cfg, "train", "one").status.success());

    // a run killed after its step-4 checkpoint, with metrics already past it
    let two = w.path("two");
    fs::create_dir_all(two.join("checkpoints")).unwrap();
    for f in ["config.json", "metrics.csv", "checkpoints/step_000004.ckpt"] {
        fs::copy(w.path("one").join(f), two.join(f)).unwrap();
    }
    let o = run(&["train", "--config", &cfg, "--data", &w.s("train"), "--out", &w.s("two"), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("step_000004"));
    for f in ["checkpoints/final.ckpt", "checkpoints/step_000008.ckpt", "metrics.csv", "traces.csv"] {
        assert_eq!(fs::read(w.path("one").join(f)).unwrap(), fs::read(two.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_rejects_a_changed_model() {
    let w = Workspace::new();
    w.synth("train", "pose", 4, 1);
    let cfg = w.config("cfg.json", "train", r#"{"epochs": 1}"#);
    assert!(w.train(&cfg, "train", "run").status.success());
    let other = w.config("other.json", "model", r#"{"hidden": 6}"#);
    let o = run(&["train", "--config", &other, "--data", &w.s("train"), "--out", &w.s("run"), "--resume"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_traces_are_a_usage_error() {
    let w = Workspace::new();
    fs::create_dir_all(w.path("run")).unwrap();
    fs::write(w.path("run/config.json"), lsattn::settings::to_json(&lsattn_core::Config::desk(lsattn_core::config::Task::Pose))).unwrap();
    fs::write(w.path("run/traces.csv"), "example_id,step,selected_layer,logit_0,logit_1,logit_2,logit_3\n").unwrap();
    let o = run(&["report-lsf", "--run", &w.s("run")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_each_op() {
    let o = run(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.starts_with("op,max_rel_err,threshold,pass"));
    for op in ["conv2d", "batch_norm", "convlstm_step", "full_model"] {
        assert!(out.lines().any(|l| l.starts_with(op) && l.ends_with("true")), "{op}");
    }
    let bad = run(&["gradcheck", "--corrupt", "pose_loss"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("pose_loss"));
    assert!(stdout(&bad).lines().any(|l| l.starts_with("pose_loss,") && l.ends_with("false")));
}
