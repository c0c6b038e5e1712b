//! JSON run configuration merged over a named preset.

use std::fs;
use std::path::Path;

use lsattn_core::config::Task;
use lsattn_core::Config;
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub fn preset(name: &str, task: Task) -> CliResult<Config> {
    match name {
        "desk" => Ok(Config::desk(task)),
        "paper-scale" => Ok(Config::paper_scale(task)),
        other => Err(CliError::usage(format!("preset: unknown preset {other:?} (desk, paper-scale)"))),
    }
}

/// Overlays `patch` onto `base`; objects merge key by key, everything else
/// is replaced.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a configuration document. The optional top-level `preset` key
/// (`desk` by default) picks the base; `model.task` picks its task, falling
/// back to `default_task`.
pub fn parse_config(text: &str, default_task: Task) -> CliResult<Config> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
    let Some(obj) = doc.as_object_mut() else {
        return Err(CliError::usage("config: top level must be an object"));
    };
    let preset_name = match obj.remove("preset") {
        None => "desk".to_string(),
        Some(Value::String(s)) => s,
        Some(_) => return Err(CliError::usage("preset: expected a string")),
    };
    let task = match doc.pointer("/model/task") {
        None => default_task,
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::usage(format!("model.task: {e}")))?,
    };
    let mut base = serde_json::to_value(preset(&preset_name, task)?).expect("presets serialize");
    merge(&mut base, doc);
    let config: Config = serde_path_to_error::deserialize(base).map_err(|e| {
        let path = e.path().to_string();
        CliError::usage(format!("{path}: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, default_task: Task) -> CliResult<Config> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, default_task)
}

pub fn to_json(config: &Config) -> String {
    serde_json::to_string_pretty(config).expect("configs serialize") + "\n"
}
