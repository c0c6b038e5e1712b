//! ADAM with global-norm gradient clipping.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| alloc::vec![0.0; p.tensor.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update using each parameter's stored gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::contract(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for p in store.params() {
        if p.tensor.grad().is_none() {
            return Err(Error::contract(format!("missing gradient for parameter {}", p.name)));
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - libm::pow(beta1, state.t as f64);
    let c2 = 1.0 - libm::pow(beta2, state.t as f64);
    for ((p, m), v) in store.params_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.tensor.grad().expect("checked above").to_vec();
        for (((w, mi), vi), gi) in p.tensor.values_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}

/// L2 norm of all stored gradients.
pub fn global_grad_norm(store: &ParamStore) -> f64 {
    let sq: f64 = store
        .params()
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    libm::sqrt(sq)
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping and whether clipping happened.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<(f64, bool)> {
    let norm = global_grad_norm(store);
    if norm <= max_norm || norm == 0.0 {
        return Ok((norm, false));
    }
    let scale = max_norm / norm;
    for p in store.params_mut() {
        if let Some(g) = p.tensor.grad() {
            let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
            p.tensor.set_grad(scaled)?;
        }
    }
    Ok((norm, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![w]));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(AdamConfig::default(), &s);
        s.params_mut()[0].tensor.set_grad(vec![0.0]).unwrap();
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.params()[0].tensor.values(), &[0.7]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(cfg, &s);
        s.params_mut()[0].tensor.set_grad(vec![1.0]).unwrap();
        adam_step(&mut s, &mut st).unwrap();
        let w = s.params()[0].tensor.values()[0];
        assert!((w + cfg.lr / (1.0 + cfg.eps)).abs() < 1e-18);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = scalar_store(0.0);
        s.add("second", Tensor::vector(vec![1.0]));
        let mut st = AdamState::new(AdamConfig::default(), &s);
        s.params_mut()[0].tensor.set_grad(vec![1.0]).unwrap();
        let err = adam_step(&mut s, &mut st).unwrap_err();
        assert!(format!("{err}").contains("second"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn clipping_scales_to_the_threshold() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::vector(vec![0.0, 0.0]));
        s.add("b", Tensor::vector(vec![0.0]));
        s.params_mut()[0].tensor.set_grad(vec![3.0, 0.0]).unwrap();
        s.params_mut()[1].tensor.set_grad(vec![4.0]).unwrap();
        assert_eq!(clip_global_norm(&mut s, 10.0).unwrap(), (5.0, false));
        assert_eq!(clip_global_norm(&mut s, 1.0).unwrap(), (5.0, true));
        assert!((global_grad_norm(&s) - 1.0).abs() < 1e-15);
        let g = s.params()[0].tensor.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && g[1] == 0.0);
    }
}
