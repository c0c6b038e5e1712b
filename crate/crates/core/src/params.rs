//! Named parameter storage shared by every module of the model.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::BatchNormStats;
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Trainable tensors in registration order, plus batch-norm running
/// statistics (not trainable).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<(String, BatchNormStats)>,
}

/// Tape handles of every parameter for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in parameter registration order, e.g. leaves created by a
    /// gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            tensor: tensor.requiring_grad(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, stats: BatchNormStats) -> StatsId {
        self.stats.push((name.into(), stats));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn stats(&self, id: StatsId) -> &BatchNormStats {
        &self.stats[id.0].1
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut BatchNormStats {
        &mut self.stats[id.0].1
    }

    pub fn all_stats(&self) -> &[(String, BatchNormStats)] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [(String, BatchNormStats)] {
        &mut self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.variable(p.tensor.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect(),
        }
    }

    /// Moves gradients from a backward pass into each parameter's grad slot;
    /// parameters the loss does not reach get zeros.
    pub fn store_grads(&mut self, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let g = match grads.take(v) {
                Some(t) => t.into_values(),
                None => alloc::vec![0.0; p.tensor.len()],
            };
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Replaces the values of parameter `name`, keeping its shape.
    pub fn set_values(&mut self, name: &str, values: &Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::contract(alloc::format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0].tensor;
        if p.dims() != values.dims() {
            return Err(Error::shape("set_values", p.dims(), values.dims()));
        }
        p.values_mut().copy_from_slice(values.values());
        Ok(())
    }
}

/// Uniform draws in `[-limit, limit]`.
pub fn uniform_tensor(rng: &mut Rng, dims: &[usize], limit: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let values = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
    Tensor::new(dims, values).expect("dims match value count")
}

/// LeCun-style fan-in scaled uniform initialization, `sqrt(3 / fan_in)`.
pub fn fan_in_uniform(rng: &mut Rng, dims: &[usize], fan_in: usize) -> Tensor {
    uniform_tensor(rng, dims, libm::sqrt(3.0 / fan_in.max(1) as f64))
}
