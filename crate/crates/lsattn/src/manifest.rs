//! Dataset manifests: `# key: value` header lines followed by one entry per
//! line, `path tx ty tz qw qx qy qz` (pose) or `path label` (class).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lsattn_core::config::Task;
use lsattn_core::data::{channel_means, Dataset, Example, Split};
use lsattn_core::loss::TaskLabel;

use crate::error::{CliError, CliResult};
use crate::pnm;

pub const MANIFEST_FILE: &str = "manifest.txt";

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Pose => "pose",
        Task::Class => "class",
    }
}

pub fn render(dataset: &Dataset) -> String {
    let mut out = String::new();
    let split = match dataset.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mean: Vec<String> = dataset.mean.iter().map(f64::to_string).collect();
    let _ = writeln!(out, "# task: {}", task_name(dataset.task));
    let _ = writeln!(out, "# split: {split}");
    let _ = writeln!(out, "# mean: {}", mean.join(" "));
    for e in &dataset.examples {
        match e.label {
            TaskLabel::Pose { position, orientation } => {
                let _ = write!(out, "{}", e.path);
                for v in position.iter().chain(&orientation) {
                    let _ = write!(out, " {v}");
                }
                out.push('\n');
            }
            TaskLabel::Class(c) => {
                let _ = writeln!(out, "{} {c}", e.path);
            }
        }
    }
    out
}

/// Writes every image and the manifest under `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> CliResult<()> {
    let io = |p: &Path, e: std::io::Error| CliError::usage(format!("cannot write {}: {e}", p.display()));
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for e in &dataset.examples {
        let path = dir.join(&e.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|err| io(parent, err))?;
        }
        pnm::write(&path, &e.image)?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, render(dataset)).map_err(|e| io(&manifest, e))
}

/// Header and entries of a manifest, before any image is read.
#[derive(Clone, Debug, PartialEq)]
pub struct Parsed {
    pub task: Task,
    pub split: Split,
    pub mean: Option<Vec<f64>>,
    pub entries: Vec<(String, TaskLabel)>,
}

pub fn parse(text: &str, source: &str) -> CliResult<Parsed> {
    let err = |line: usize, msg: String| CliError::usage(format!("{source}:{line}: {msg}"));
    let mut task = None;
    let mut split = Split::Train;
    let mut mean = None;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            let Some((key, value)) = header.split_once(':') else {
                continue;
            };
            let value = value.trim();
            match key.trim() {
                "task" => {
                    task = Some(match value {
                        "pose" => Task::Pose,
                        "class" => Task::Class,
                        other => return Err(err(n, format!("unknown task {other:?}"))),
                    })
                }
                "split" => {
                    split = match value {
                        "train" => Split::Train,
                        "test" => Split::Test,
                        other => return Err(err(n, format!("unknown split {other:?}"))),
                    }
                }
                "mean" => {
                    let parsed: Result<Vec<f64>, _> = value.split_whitespace().map(str::parse).collect();
                    mean = Some(parsed.map_err(|e| err(n, format!("bad mean: {e}")))?);
                }
                _ => {}
            }
            continue;
        }
        let task = task.ok_or_else(|| err(n, "entry before the `# task:` header".into()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let label = match task {
            Task::Pose => {
                if fields.len() != 8 {
                    return Err(err(n, format!("pose entry needs 8 fields, found {}", fields.len())));
                }
                let mut v = [0.0; 7];
                for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                    *slot = f.parse().map_err(|_| err(n, format!("bad number {f:?}")))?;
                }
                let q = [v[3], v[4], v[5], v[6]];
                let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(err(n, "orientation quaternion has zero norm".into()));
                }
                TaskLabel::pose([v[0], v[1], v[2]], q.map(|x| x / norm)).map_err(|e| err(n, e.to_string()))?
            }
            Task::Class => {
                if fields.len() != 2 {
                    return Err(err(n, format!("class entry needs 2 fields, found {}", fields.len())));
                }
                TaskLabel::Class(fields[1].parse().map_err(|_| err(n, format!("bad label {:?}", fields[1])))?)
            }
        };
        entries.push((fields[0].to_string(), label));
    }
    let task = task.ok_or_else(|| CliError::usage(format!("{source}: missing `# task:` header")))?;
    Ok(Parsed {
        task,
        split,
        mean,
        entries,
    })
}

/// Accepts a dataset directory or the manifest file itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads a manifest and decodes every image it references. Without a
/// `# mean:` header the mean is computed from the loaded images.
pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    let file = manifest_path(path);
    let text = fs::read_to_string(&file).map_err(|e| CliError::usage(format!("cannot read manifest {}: {e}", file.display())))?;
    let parsed = parse(&text, &file.display().to_string())?;
    let root = file.parent().unwrap_or(Path::new("."));
    let mut examples = Vec::with_capacity(parsed.entries.len());
    for (rel, label) in parsed.entries {
        let image_path = root.join(&rel);
        if !image_path.is_file() {
            return Err(CliError::usage(format!("missing image {}", image_path.display())));
        }
        examples.push(Example {
            path: rel,
            image: pnm::read(&image_path)?,
            label,
        });
    }
    let mean = parsed.mean.unwrap_or_else(|| channel_means(&examples));
    Ok(Dataset {
        task: parsed.task,
        split: parsed.split,
        mean,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_in_order() {
        let text = "# task: pose\n# mean: 100.5\nimg/a.pgm 1.0 2.0 0.0 1.0 0.0 0.0 0.0\nimg/b.pgm 0 0 0 0 0 0 2\n\nimg/c.pgm 0 0 0 1 0 0 0\n";
        let p = parse(text, "m").unwrap();
        assert_eq!(p.entries.len(), 3);
        assert_eq!(p.entries[0].0, "img/a.pgm");
        assert_eq!(
            p.entries[0].1,
            TaskLabel::Pose {
                position: [1.0, 2.0, 0.0],
                orientation: [1.0, 0.0, 0.0, 0.0]
            }
        );
        assert_eq!(p.mean, Some(vec![100.5]));
        let TaskLabel::Pose { orientation, .. } = p.entries[1].1 else { panic!() };
        assert_eq!(orientation, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let e = parse("# task: class\na.pgm 1\nb.pgm\n", "m.txt").unwrap_err();
        assert!(e.message.starts_with("m.txt:3:"), "{}", e.message);
        let e = parse("# task: pose\na.pgm 1 2 x 1 0 0 0\n", "m.txt").unwrap_err();
        assert!(e.message.starts_with("m.txt:2:"), "{}", e.message);
        assert!(parse("a.pgm 1\n", "m").is_err());
    }
}
