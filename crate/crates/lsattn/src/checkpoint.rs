//! Checkpoints: one JSON manifest line followed by concatenated tensor
//! dumps (parameters, ADAM first moments, ADAM second moments, then the
//! running mean and variance of every batch-norm layer).

use std::fs;
use std::path::Path;

use lsattn_core::optim::AdamState;
use lsattn_core::train::TrainingState;
use lsattn_core::{Config, Model, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

const FORMAT: &str = "lsattn-checkpoint/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    config: Config,
    step: u64,
    clip_events: u64,
    seed: u64,
    mean: Vec<f64>,
    adam_t: u64,
    params: Vec<Entry>,
    stats: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dims: Vec<usize>,
}

pub fn encode(state: &TrainingState) -> CliResult<Vec<u8>> {
    let store = &state.model.store;
    let header = Header {
        format: FORMAT.into(),
        config: state.model.config.clone(),
        step: state.step,
        clip_events: state.clip_events,
        seed: state.seed,
        mean: state.mean.clone(),
        adam_t: state.adam.t,
        params: store
            .params()
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                dims: p.tensor.dims().to_vec(),
            })
            .collect(),
        stats: store
            .all_stats()
            .iter()
            .map(|(name, s)| Entry {
                name: name.clone(),
                dims: vec![s.running_mean.len()],
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("checkpoint header serializes");
    out.push(b'\n');
    for p in store.params() {
        p.tensor.write_dump(&mut out)?;
    }
    for (moments, p) in state.adam.m.iter().chain(&state.adam.v).zip(store.params().iter().cycle()) {
        Tensor::new(p.tensor.dims(), moments.clone())?.write_dump(&mut out)?;
    }
    for (_, s) in store.all_stats() {
        Tensor::vector(s.running_mean.clone()).write_dump(&mut out)?;
        Tensor::vector(s.running_var.clone()).write_dump(&mut out)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn next(&mut self, what: &str, dims: &[usize]) -> CliResult<Tensor> {
        let (t, used) = Tensor::read_dump(&self.bytes[self.pos..]).map_err(|e| CliError::usage(format!("checkpoint {what}: {e}")))?;
        if t.dims() != dims {
            return Err(CliError::usage(format!(
                "checkpoint {what}: dims {:?}, expected {dims:?}",
                t.dims()
            )));
        }
        self.pos += used;
        Ok(t)
    }
}

pub fn decode(bytes: &[u8]) -> CliResult<TrainingState> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::usage("checkpoint: missing header line"))?;
    let header: Header =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| CliError::usage(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(CliError::usage(format!("checkpoint: unsupported format {:?}", header.format)));
    }
    let mut state = TrainingState::new(header.config, header.seed, header.mean)?;
    state.step = header.step;
    state.clip_events = header.clip_events;
    state.adam.t = header.adam_t;
    let store = &mut state.model.store;
    let names: Vec<(&str, &[usize])> = store.params().iter().map(|p| (p.name.as_str(), p.tensor.dims())).collect();
    let listed: Vec<(&str, &[usize])> = header.params.iter().map(|e| (e.name.as_str(), e.dims.as_slice())).collect();
    if names != listed {
        return Err(CliError::usage("checkpoint: parameter list does not match the configured model"));
    }
    let mut r = Reader {
        bytes,
        pos: newline + 1,
    };
    let dims: Vec<Vec<usize>> = header.params.iter().map(|e| e.dims.clone()).collect();
    for (p, d) in store.params_mut().iter_mut().zip(&dims) {
        let t = r.next(&p.name, d)?;
        p.tensor.values_mut().copy_from_slice(t.values());
    }
    let AdamState { m, v, .. } = &mut state.adam;
    for (slot, d) in m.iter_mut().zip(&dims) {
        *slot = r.next("adam.m", d)?.into_values();
    }
    for (slot, d) in v.iter_mut().zip(&dims) {
        *slot = r.next("adam.v", d)?.into_values();
    }
    if store.all_stats().len() != header.stats.len() {
        return Err(CliError::usage("checkpoint: batch-norm layers do not match the configured model"));
    }
    for ((name, s), e) in store.all_stats_mut().iter_mut().zip(&header.stats) {
        if *name != e.name || s.running_mean.len() != e.dims[0] {
            return Err(CliError::usage(format!("checkpoint: unexpected batch-norm entry {}", e.name)));
        }
        s.running_mean = r.next(name, &e.dims)?.into_values();
        s.running_var = r.next(name, &e.dims)?.into_values();
    }
    if r.pos != bytes.len() {
        return Err(CliError::usage("checkpoint: trailing bytes"));
    }
    Ok(state)
}

pub fn save(path: &Path, state: &TrainingState) -> CliResult<String> {
    let bytes = encode(state)?;
    fs::write(path, &bytes).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(digest(&bytes))
}

pub fn load(path: &Path) -> CliResult<TrainingState> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}

pub fn load_model(path: &Path) -> CliResult<(Model, Vec<f64>, u64)> {
    let s = load(path)?;
    Ok((s.model, s.mean, s.seed))
}

/// Hex SHA-256 of a byte string.
pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lsattn_core::checks::small_config;
    use lsattn_core::config::Task;

    #[test]
    fn round_trip_is_exact() {
        let mut s = TrainingState::new(small_config(Task::Pose), 3, vec![0.1 + 0.2]).unwrap();
        s.step = 7;
        s.clip_events = 2;
        s.adam.t = 7;
        s.adam.m[0][0] = 1.0 / 3.0;
        s.adam.v[1][0] = 2.0f64.sqrt();
        s.model.store.all_stats_mut()[0].1.running_var[0] = 0.7;
        let bytes = encode(&s).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.model.store, s.model.store);
        assert_eq!(back.adam, s.adam);
        assert_eq!((back.step, back.clip_events, back.seed), (7, 2, 3));
        assert_eq!(back.mean, s.mean);
        assert_eq!(encode(&back).unwrap(), bytes);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
