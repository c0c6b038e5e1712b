//! Gumbel-Max sampling, its softmax relaxation, and the straight-through
//! combination used for hard layer selection.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::{Rng, UNIT_EPS};
use crate::tape::{Tape, Var};

/// Standard Gumbel(0, 1) draw from a uniform `u`; `u` is clamped into
/// `[UNIT_EPS, 1 - UNIT_EPS]` first.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIT_EPS, 1.0 - UNIT_EPS);
    -libm::log(-libm::log(u))
}

pub fn gumbel_sample(rng: &mut Rng) -> f64 {
    gumbel_from_uniform(rng.uniform())
}

pub fn gumbel_noise(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gumbel_sample(rng)).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(k: usize, index: usize) -> Vec<f64> {
    let mut v = alloc::vec![0.0; k];
    v[index] = 1.0;
    v
}

/// One-hot of `argmax(logits + noise)`.
pub fn gumbel_max_with_noise(logits: &[f64], noise: &[f64]) -> Vec<f64> {
    let perturbed: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| l + g).collect();
    one_hot(logits.len(), argmax(&perturbed))
}

/// Draws `k` Gumbel values and returns the hard one-hot sample.
pub fn gumbel_max_select(logits: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::contract("gumbel_max_select needs k >= 1 finite logits"));
    }
    let noise = gumbel_noise(rng, logits.len());
    Ok(gumbel_max_with_noise(logits, &noise))
}

/// `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax(logits: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    if noise.len() != logits.len() {
        return Err(Error::shape("gumbel_softmax", &[logits.len()], &[noise.len()]));
    }
    let scaled: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    let mut out = alloc::vec![0.0; scaled.len()];
    kernels::softmax_into(&scaled, &mut out);
    Ok(out)
}

/// Everything about one selection: logits, the noise realization, the
/// temperature and both the hard and relaxed samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionDraw {
    pub logits: Vec<f64>,
    pub noise: Vec<f64>,
    pub tau: f64,
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
}

impl SelectionDraw {
    pub fn new(logits: &[f64], noise: &[f64], tau: f64) -> Result<Self> {
        let soft = gumbel_softmax(logits, noise, tau)?;
        Ok(Self {
            logits: logits.to_vec(),
            noise: noise.to_vec(),
            tau,
            hard: gumbel_max_with_noise(logits, noise),
            soft,
        })
    }

    pub fn sample(logits: &[f64], rng: &mut Rng, tau: f64) -> Result<Self> {
        let noise = gumbel_noise(rng, logits.len());
        Self::new(logits, &noise, tau)
    }

    pub fn index(&self) -> usize {
        argmax(&self.hard)
    }
}

/// Straight-through selection on the tape: samples fresh noise, returns the
/// hard one-hot forward value and records the relaxed backward path. The
/// noise used is returned alongside.
pub fn straight_through_select(tape: &mut Tape, logits: Var, rng: &mut Rng, tau: f64) -> Result<(Var, Vec<f64>)> {
    let noise = gumbel_noise(rng, tape.value(logits).len());
    let out = tape.straight_through(logits, &noise, tau)?;
    Ok((out, noise))
}

/// Exponentially decaying temperature with a floor.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay_rate: f64,
}

impl TemperatureSchedule {
    pub fn new(tau0: f64, tau_min: f64, decay_rate: f64) -> Result<Self> {
        if !(tau0 > 0.0 && tau_min > 0.0 && tau_min <= tau0 && decay_rate >= 0.0) {
            return Err(Error::config(format!(
                "invalid temperature schedule tau0={tau0} tau_min={tau_min} decay_rate={decay_rate}"
            )));
        }
        Ok(Self {
            tau0,
            tau_min,
            decay_rate,
        })
    }

    /// Decay rate that reaches `tau_min` exactly after `steps` steps.
    pub fn spanning(tau0: f64, tau_min: f64, steps: u64) -> Result<Self> {
        let rate = if steps == 0 {
            0.0
        } else {
            libm::log(tau0 / tau_min) / steps as f64
        };
        Self::new(tau0, tau_min, rate)
    }

    pub fn anneal(&self, step: u64) -> f64 {
        anneal(self, step)
    }
}

/// `max(tau_min, tau0 · exp(-decay_rate · step))`.
pub fn anneal(schedule: &TemperatureSchedule, step: u64) -> f64 {
    f64::max(
        schedule.tau_min,
        schedule.tau0 * libm::exp(-schedule.decay_rate * step as f64),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn gumbel_closed_forms() {
        let e = core::f64::consts::E;
        assert!(gumbel_from_uniform(1.0 / e).abs() < 1e-15);
        assert!((gumbel_from_uniform(libm::exp(-e)) + 1.0).abs() < 1e-12);
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_max_with_forced_noise() {
        let logits: Vec<f64> = [0.2f64, 0.3, 0.5].iter().map(|p| libm::log(*p)).collect();
        assert_eq!(gumbel_max_with_noise(&logits, &[0.0; 3]), vec![0.0, 0.0, 1.0]);
        assert_eq!(gumbel_max_with_noise(&[0.0; 3], &[1.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]);
        // ties resolve to the lowest index
        assert_eq!(gumbel_max_with_noise(&[0.0; 3], &[0.0; 3]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn gumbel_softmax_closed_forms() {
        assert_eq!(gumbel_softmax(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let e = core::f64::consts::E;
        let y = gumbel_softmax(&[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((y[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((y[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
        let y = gumbel_softmax(&[1.0, 0.0], &[0.0, 0.0], 0.1).unwrap();
        assert!((y[0] - 0.99995).abs() < 1e-5);
        assert!((y[1] - 4.54e-5).abs() < 1e-7);
        assert!(gumbel_softmax(&[1.0], &[0.0], 0.0).is_err());
        assert!(gumbel_softmax(&[1.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn straight_through_forward_is_one_hot_and_backward_is_relaxed() {
        let logits = vec![0.3, -1.2, 0.8, 0.1];
        let weights = vec![1.5, -0.5, 2.0, 0.25];
        let mut rng = Rng::new(11, 0);
        for tau in [0.1, 0.5, 1.0, 5.0] {
            let mut tape = Tape::new();
            let l = tape.variable(Tensor::vector(logits.clone()));
            let (z, noise) = straight_through_select(&mut tape, l, &mut rng.clone(), tau).unwrap();
            let zv = tape.value(z).values().to_vec();
            assert_eq!(zv.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(zv.iter().filter(|&&v| v == 0.0).count(), 3);
            let w = tape.constant(Tensor::vector(weights.clone()));
            let p = tape.mul(z, w).unwrap();
            let s = tape.sum(p).unwrap();
            let g_st = tape.backward(s).unwrap().get(l).unwrap().clone();

            let l = tape.variable(Tensor::vector(logits.clone()));
            let y = tape.gumbel_softmax(l, &noise, tau).unwrap();
            let w = tape.constant(Tensor::vector(weights.clone()));
            let p = tape.mul(y, w).unwrap();
            let s = tape.sum(p).unwrap();
            let g_soft = tape.backward(s).unwrap().get(l).unwrap().clone();
            for (a, b) in g_st.values().iter().zip(g_soft.values()) {
                assert!((a - b).abs() <= 1e-12);
            }
            rng.next_u64();
        }
    }

    #[test]
    fn anneal_closed_forms() {
        let s = TemperatureSchedule::new(1.0, 0.5, core::f64::consts::LN_2 / 1000.0).unwrap();
        assert_eq!(anneal(&s, 0), 1.0);
        assert!((anneal(&s, 1000) - 0.5).abs() < 1e-12);
        assert_eq!(anneal(&s, 2000), 0.5);
        let flat = TemperatureSchedule::new(0.8, 0.5, 0.0).unwrap();
        assert_eq!(anneal(&flat, 1_000_000), 0.8);
        assert!(TemperatureSchedule::new(0.4, 0.5, 0.1).is_err());
        let span = TemperatureSchedule::spanning(1.0, 0.5, 2000).unwrap();
        assert!((span.anneal(2000) - 0.5).abs() < 1e-12);
    }

    // Reference values from an independent 2e5-draw numpy simulation with four
    // standard-normal logits: 0.9957 at tau 0.01 and 0.2952 at tau 10.
    #[test]
    fn mean_max_component_matches_simulation() {
        let mean_max = |tau: f64| {
            let mut rng = Rng::new(77, 3);
            let n = 20_000;
            let mut total = 0.0;
            for _ in 0..n {
                let logits: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                let noise = gumbel_noise(&mut rng, 4);
                total += gumbel_softmax(&logits, &noise, tau).unwrap().into_iter().fold(0.0, f64::max);
            }
            total / n as f64
        };
        assert!((mean_max(0.01) - 0.9957).abs() < 0.001);
        assert!((mean_max(10.0) - 0.2952).abs() < 0.002);
    }

    proptest::proptest! {
        #[test]
        fn relaxed_argmax_matches_hard_for_any_temperature(
            logits in proptest::collection::vec(-3.0f64..3.0, 2..6),
            seed in 0u64..10_000,
            tau in 0.01f64..20.0,
        ) {
            let mut rng = Rng::new(seed, 1);
            let draw = SelectionDraw::sample(&logits, &mut rng, tau).unwrap();
            proptest::prop_assert_eq!(argmax(&draw.soft), draw.index());
            proptest::prop_assert!((draw.soft.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            proptest::prop_assert_eq!(draw.hard.iter().sum::<f64>(), 1.0);
        }

        #[test]
        fn anneal_is_monotone_and_floored(tau0 in 0.1f64..5.0, frac in 0.01f64..1.0, rate in 0.0f64..0.1, step in 0u64..10_000) {
            let s = TemperatureSchedule::new(tau0, tau0 * frac, rate).unwrap();
            proptest::prop_assert!(s.anneal(step + 1) <= s.anneal(step));
            proptest::prop_assert!(s.anneal(step) >= s.tau_min);
        }
    }
}
