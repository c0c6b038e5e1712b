//! Central-difference gradient checking for tensor programs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Worst coordinate found by a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(REL_ERR_FLOOR, analytic.abs() + numeric.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor], grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if grad {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar program, got dims {:?}",
            tape.dims(out)
        )));
    }
    Ok((tape, vars, out))
}

/// Checks the listed `(input index, flat coordinate)` pairs.
pub fn grad_check_coords<F>(f: F, inputs: &[Tensor], coords: &[(usize, usize)], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        input: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in coords {
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g.values()[j]);
        let original = inputs[i].values()[j];
        probe[i].values_mut()[j] = original + step;
        let (tp, _, op) = evaluate(&f, &probe, false)?;
        let plus = tp.value(op).values()[0];
        probe[i].values_mut()[j] = original - step;
        let (tm, _, om) = evaluate(&f, &probe, false)?;
        let minus = tm.value(om).values()[0];
        probe[i].values_mut()[j] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_err || err.is_nan() {
            report = GradCheckReport {
                max_rel_err: err,
                input: i,
                coord: j,
                analytic,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Every coordinate of every input.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, inputs, &coords, step)
}

/// Max relative error between the tape gradient of `f` and central
/// differences, over all input coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, inputs, step)?.max_rel_err)
}
