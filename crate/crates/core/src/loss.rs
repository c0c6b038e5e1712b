//! Task labels and the two training objectives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::Task;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{Tape, Var};

/// Added to `‖q̂‖` when it is numerically zero.
pub const QUATERNION_GUARD: f64 = 1e-12;
/// Lower clamp on the predicted class probability.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskLabel {
    /// Position and unit orientation quaternion `(w, x, y, z)`.
    Pose { position: [f64; 3], orientation: [f64; 4] },
    Class(usize),
}

impl TaskLabel {
    pub fn pose(position: [f64; 3], orientation: [f64; 4]) -> Result<Self> {
        let n = norm(&orientation);
        if (n - 1.0).abs() > 1e-9 || position.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("pose label needs a unit quaternion, got norm {n}")));
        }
        Ok(Self::Pose { position, orientation })
    }

    pub fn task(&self) -> Task {
        match self {
            Self::Pose { .. } => Task::Pose,
            Self::Class(_) => Task::Class,
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Pose loss for one example with its gradient in the 7 predicted values.
/// The third field reports whether the quaternion guard fired.
pub fn pose_loss_value(pred: &[f64], position: &[f64; 3], orientation: &[f64; 4], beta: f64) -> Result<(f64, [f64; 7], bool)> {
    if pred.len() != 7 {
        return Err(Error::shape("pose_loss", &[pred.len()], &[7]));
    }
    let mut grad = [0.0; 7];
    let dx: Vec<f64> = (0..3).map(|i| pred[i] - position[i]).collect();
    let pos_err = norm(&dx);
    if pos_err > 0.0 {
        for i in 0..3 {
            grad[i] = dx[i] / pos_err;
        }
    }

    let qh = &pred[3..7];
    let n = norm(qh);
    let degenerate = n < QUATERNION_GUARD;
    let denom = if degenerate { n + QUATERNION_GUARD } else { n };
    let unit: Vec<f64> = qh.iter().map(|v| v / denom).collect();
    let r: Vec<f64> = orientation.iter().zip(&unit).map(|(q, u)| q - u).collect();
    let rot_err = norm(&r);
    if rot_err > 0.0 {
        // d‖q − q̂/d‖/dq̂ = −J r/‖r‖ with J = I/d − q̂q̂ᵀ/(d²·n)
        let rhat: Vec<f64> = r.iter().map(|v| v / rot_err).collect();
        let proj = if n > 0.0 {
            qh.iter().zip(&rhat).map(|(a, b)| a * b).sum::<f64>() / (denom * denom * n)
        } else {
            0.0
        };
        for i in 0..4 {
            grad[3 + i] = -beta * (rhat[i] / denom - qh[i] * proj);
        }
    }
    Ok((pos_err + beta * rot_err, grad, degenerate))
}

/// Batch-mean pose loss over predictions `[batch, 7]`.
pub fn pose_loss(tape: &mut Tape, pred: Var, labels: &[TaskLabel], beta: f64) -> Result<Var> {
    let (batch, width) = rows(tape, pred, labels.len(), "pose_loss")?;
    if width != 7 {
        return Err(Error::shape("pose_loss", tape.dims(pred), &[batch, 7]));
    }
    let values = tape.value(pred).values().to_vec();
    let mut total = 0.0;
    let mut grad = vec![0.0; values.len()];
    let mut degenerate = 0;
    for (b, label) in labels.iter().enumerate() {
        let TaskLabel::Pose { position, orientation } = label else {
            return Err(Error::contract("pose_loss given a class label"));
        };
        let (v, g, d) = pose_loss_value(&values[b * 7..(b + 1) * 7], position, orientation, beta)?;
        total += v;
        degenerate += usize::from(d);
        for (o, gv) in grad[b * 7..(b + 1) * 7].iter_mut().zip(g) {
            *o = gv / batch as f64;
        }
    }
    for _ in 0..degenerate {
        tape.note_degenerate_quaternion();
    }
    Ok(tape.scalar_loss(pred, total / batch as f64, grad))
}

/// Softmax cross-entropy for one example with its gradient `ŷ − y`.
pub fn cross_entropy_value(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::contract("cross_entropy needs at least two classes"));
    }
    if label >= logits.len() {
        return Err(Error::contract(format!("class label {label} out of range for {} classes", logits.len())));
    }
    let mut p = vec![0.0; logits.len()];
    kernels::softmax_into(logits, &mut p);
    let loss = -libm::log(p[label].max(PROBABILITY_FLOOR));
    p[label] -= 1.0;
    Ok((loss, p))
}

/// Batch-mean cross-entropy over logits `[batch, n_classes]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[TaskLabel]) -> Result<Var> {
    let (batch, width) = rows(tape, logits, labels.len(), "cross_entropy")?;
    let values = tape.value(logits).values().to_vec();
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(values.len());
    for (b, label) in labels.iter().enumerate() {
        let TaskLabel::Class(c) = *label else {
            return Err(Error::contract("cross_entropy given a pose label"));
        };
        let (v, g) = cross_entropy_value(&values[b * width..(b + 1) * width], c)?;
        total += v;
        grad.extend(g.into_iter().map(|x| x / batch as f64));
    }
    Ok(tape.scalar_loss(logits, total / batch as f64, grad))
}

/// Loss for whichever task the labels carry.
pub fn task_loss(tape: &mut Tape, pred: Var, labels: &[TaskLabel], beta: f64) -> Result<Var> {
    match labels.first().map(TaskLabel::task) {
        Some(Task::Pose) => pose_loss(tape, pred, labels, beta),
        Some(Task::Class) => cross_entropy(tape, pred, labels),
        None => Err(Error::contract("loss over an empty batch")),
    }
}

fn rows(tape: &Tape, pred: Var, n_labels: usize, op: &'static str) -> Result<(usize, usize)> {
    let dims = tape.dims(pred);
    match *dims {
        [w] if n_labels == 1 => Ok((1, w)),
        [b, w] if b == n_labels && b > 0 => Ok((b, w)),
        _ => Err(Error::shape(op, dims, &[n_labels])),
    }
}
