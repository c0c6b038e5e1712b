//! Evaluation metrics and layer-selection frequencies.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gumbel::argmax;
use crate::loss::{norm, TaskLabel};
use crate::model::SelectionTrace;

/// Geodesic angle between two orientations in degrees, insensitive to the
/// quaternion sign.
pub fn angular_error(q: &[f64; 4], q_hat: &[f64]) -> Result<f64> {
    if q_hat.len() != 4 {
        return Err(Error::shape("angular_error", &[q_hat.len()], &[4]));
    }
    let (n, nh) = (norm(q), norm(q_hat));
    if n == 0.0 || nh == 0.0 {
        return Err(Error::contract("angular_error of a zero quaternion"));
    }
    let dot: f64 = q.iter().zip(q_hat).map(|(a, b)| a * b).sum::<f64>() / (n * nh);
    Ok(2.0 * libm::acos(dot.abs().min(1.0)).to_degrees())
}

/// Middle element, or the mean of the two middle elements.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("median of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metrics {
    Pose { median_position: f64, median_orientation_deg: f64 },
    Class { mean_accuracy: f64 },
}

impl Metrics {
    /// `key=value` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Self::Pose {
                median_position,
                median_orientation_deg,
            } => vec![
                ("median_position", median_position),
                ("median_orientation_deg", median_orientation_deg),
            ],
            Self::Class { mean_accuracy } => vec![("mean_accuracy", mean_accuracy)],
        }
    }
}

/// Median position and orientation errors (pose) or accuracy (class).
pub fn median_metrics(predictions: &[Vec<f64>], labels: &[TaskLabel]) -> Result<Metrics> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "metrics over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    match labels[0] {
        TaskLabel::Pose { .. } => {
            let mut pos = Vec::with_capacity(labels.len());
            let mut rot = Vec::with_capacity(labels.len());
            for (p, l) in predictions.iter().zip(labels) {
                let TaskLabel::Pose { position, orientation } = l else {
                    return Err(Error::contract("mixed task labels"));
                };
                if p.len() != 7 {
                    return Err(Error::shape("median_metrics", &[p.len()], &[7]));
                }
                let d: Vec<f64> = (0..3).map(|i| p[i] - position[i]).collect();
                pos.push(norm(&d));
                rot.push(angular_error(orientation, &p[3..7])?);
            }
            Ok(Metrics::Pose {
                median_position: median(&pos)?,
                median_orientation_deg: median(&rot)?,
            })
        }
        TaskLabel::Class(_) => {
            let mut correct = 0usize;
            for (p, l) in predictions.iter().zip(labels) {
                let TaskLabel::Class(c) = *l else {
                    return Err(Error::contract("mixed task labels"));
                };
                correct += usize::from(argmax(p) == c);
            }
            Ok(Metrics::Class {
                mean_accuracy: correct as f64 / labels.len() as f64,
            })
        }
    }
}

/// Percentage of all recurrent steps, over all traces, that selected each
/// bank entry.
pub fn lsf_histogram(traces: &[SelectionTrace], k: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; k];
    let mut total = 0usize;
    for t in traces {
        for s in &t.steps {
            if s.layer >= k {
                return Err(Error::contract(format!("trace selects layer {} of {k}", s.layer)));
            }
            counts[s.layer] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::contract("layer selection frequencies of no steps"));
    }
    Ok(counts.iter().map(|&c| 100.0 * c as f64 / total as f64).collect())
}
