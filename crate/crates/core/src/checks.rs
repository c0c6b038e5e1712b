//! Finite-difference gradient suite over every differentiable operation
//! and the assembled model.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{ConvLstm, Merge, MultiConv, Relaxation, SpatialAttention};
use crate::config::{BnPosition, Config, Task};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_coords, grad_check_report, GradCheckReport};
use crate::gumbel;
use crate::loss::{self, TaskLabel};
use crate::model::{Model, NoiseSource, ProbeSettings};
use crate::ops::{BatchNormStats, Mode, Padding};
use crate::params::{uniform_tensor, Bound, ParamStore};
use crate::rng::Rng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step used throughout the suite.
pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_THRESHOLD: f64 = 1e-5;
pub const MODEL_THRESHOLD: f64 = 1e-4;
/// Parameter coordinates sampled for the whole-model check.
pub const MODEL_COORDS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub report: GradCheckReport,
    pub threshold: f64,
}

impl CheckResult {
    pub fn max_rel_err(&self) -> f64 {
        self.report.max_rel_err
    }

    pub fn passed(&self) -> bool {
        self.report.max_rel_err <= self.threshold
    }
}

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    op: &'static str,
    program: Program,
    inputs: Vec<Tensor>,
}

pub const OPS: [&str; 16] = [
    "conv2d",
    "dense",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "softmax_spatial",
    "batch_norm",
    "multi_conv",
    "convlstm_step",
    "spatial_attention",
    "aggregate_predict",
    "pose_loss",
    "cross_entropy",
    "straight_through",
    "full_model",
];

/// `⟨w, y⟩` for a fixed random readout `w`, turning any output into a
/// scalar with a generic gradient.
fn readout(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn rand(rng: &mut Rng, dims: &[usize]) -> Tensor {
    uniform_tensor(rng, dims, 1.0)
}

/// Doubles the gradient flowing back through `loss`; used to prove the
/// harness flags a wrong derivative.
fn corrupt(tape: &mut Tape, loss: Var) -> Var {
    let value = tape.value(loss).clone();
    tape.custom(loss, value, Box::new(|_, _, g| g.iter().map(|v| 2.0 * v).collect()))
}

fn primitive_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();

    let w = rand(rng, &[2, 6, 6, 4]);
    cases.push(Case {
        op: "conv2d",
        program: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), Padding::Same)?;
            readout(t, y, &w)
        }),
        inputs: vec![rand(rng, &[2, 6, 6, 3]), rand(rng, &[3, 3, 3, 4]), rand(rng, &[4])],
    });

    let w = rand(rng, &[3, 5]);
    cases.push(Case {
        op: "dense",
        program: Box::new(move |t, v| {
            let y = t.dense(v[0], v[1], Some(v[2]))?;
            readout(t, y, &w)
        }),
        inputs: vec![rand(rng, &[3, 8]), rand(rng, &[8, 5]), rand(rng, &[5])],
    });

    for (op, act) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu(0.01)),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        let w = rand(rng, &[4, 5]);
        // keep inputs away from the kink at zero
        let x: Vec<f64> = (0..20)
            .map(|_| {
                let u = rng.uniform_range(0.1, 2.0);
                if rng.uniform() < 0.5 {
                    -u
                } else {
                    u
                }
            })
            .collect();
        cases.push(Case {
            op,
            program: Box::new(move |t, v| {
                let y = t.activation(v[0], act)?;
                readout(t, y, &w)
            }),
            inputs: vec![Tensor::new(&[4, 5], x)?],
        });
    }

    let w = rand(rng, &[2, 4, 4, 1]);
    cases.push(Case {
        op: "softmax_spatial",
        program: Box::new(move |t, v| {
            let y = t.softmax_spatial(v[0])?;
            readout(t, y, &w)
        }),
        inputs: vec![rand(rng, &[2, 4, 4, 1])],
    });

    let w = rand(rng, &[3, 2, 2, 3]);
    cases.push(Case {
        op: "batch_norm",
        program: Box::new(move |t, v| {
            let mut stats = BatchNormStats::new(3, 0.99, 1e-3)?;
            let y = t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train)?;
            readout(t, y, &w)
        }),
        inputs: vec![rand(rng, &[3, 2, 2, 3]), rand(rng, &[3]), rand(rng, &[3])],
    });

    let mut store = ParamStore::new();
    let mc = MultiConv::new(&mut store, rng, "mc", &[1, 3, 5], 2, 6, Merge::Concat, true)?;
    let w = rand(rng, &[2, 5, 5, 6]);
    let mut inputs = vec![rand(rng, &[2, 5, 5, 2])];
    inputs.extend(store.params().iter().map(|p| p.tensor.clone()));
    cases.push(Case {
        op: "multi_conv",
        program: Box::new(move |t, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let y = mc.forward(t, &bound, v[0])?;
            readout(t, y, &w)
        }),
        inputs,
    });

    let mut store = ParamStore::new();
    let lstm = ConvLstm::new(&mut store, rng, &[1, 3], 2, 4, 3)?;
    let wh = rand(rng, &[2, 3, 3, 4]);
    let wc = rand(rng, &[2, 3, 3, 4]);
    let mut inputs = vec![rand(rng, &[2, 3, 3, 2]), rand(rng, &[2, 3, 3, 4]), rand(rng, &[2, 3, 3, 4])];
    inputs.extend(store.params().iter().map(|p| rand(rng, p.tensor.dims())));
    cases.push(Case {
        op: "convlstm_step",
        program: Box::new(move |t, v| {
            let bound = Bound::from_vars(v[3..].to_vec());
            let (h, c) = lstm.step(t, &bound, v[0], v[1], v[2])?;
            let a = readout(t, h, &wh)?;
            let b = readout(t, c, &wc)?;
            t.add(a, b)
        }),
        inputs,
    });

    let mut store = ParamStore::new();
    let att = SpatialAttention::new(
        &mut store,
        rng,
        &[1, 3, 5],
        4,
        3,
        Activation::LeakyRelu(0.01),
        BnPosition::AfterScore,
        true,
        0.99,
        1e-3,
    )?;
    let w = rand(rng, &[2, 4, 4, 3]);
    let mut inputs = vec![rand(rng, &[2, 4, 4, 3]), rand(rng, &[2, 4, 4, 4])];
    inputs.extend(store.params().iter().map(|p| rand(rng, p.tensor.dims())));
    cases.push(Case {
        op: "spatial_attention",
        program: Box::new(move |t, v| {
            let mut s = store.clone();
            let bound = Bound::from_vars(v[2..].to_vec());
            let (o, _) = att.forward(t, &bound, &mut s, v[0], v[1], Mode::Train)?;
            readout(t, o, &w)
        }),
        inputs,
    });

    let mut cfg = small_config(Task::Class);
    cfg.model.n_steps = 2;
    let model = Model::new(cfg, rng.next_u64())?;
    let w = rand(rng, &[2, model.config.model.output_width()]);
    let (hw, hb) = (model.net.head_w, model.net.head_b);
    let inputs = vec![
        rand(rng, &[2, 4, 4, 8]),
        rand(rng, &[2, 4, 4, 8]),
        rand(rng, model.store.get(hw).dims()),
        rand(rng, model.store.get(hb).dims()),
    ];
    cases.push(Case {
        op: "aggregate_predict",
        program: Box::new(move |t, v| {
            let mut vars = model.store.bind_frozen(t).vars().to_vec();
            vars[hw.index()] = v[2];
            vars[hb.index()] = v[3];
            let y = model.net.aggregate_predict(t, &Bound::from_vars(vars), &v[..2])?;
            readout(t, y, &w)
        }),
        inputs,
    });

    let labels: Vec<TaskLabel> = (0..3).map(|_| random_pose_label(rng)).collect::<Result<_>>()?;
    cases.push(Case {
        op: "pose_loss",
        program: Box::new(move |t, v| loss::pose_loss(t, v[0], &labels, 3.0)),
        inputs: vec![uniform_tensor(rng, &[3, 7], 2.0)],
    });

    let labels: Vec<TaskLabel> = (0..3).map(|_| TaskLabel::Class(rng.below(5))).collect();
    cases.push(Case {
        op: "cross_entropy",
        program: Box::new(move |t, v| loss::cross_entropy(t, v[0], &labels)),
        inputs: vec![uniform_tensor(rng, &[3, 5], 3.0)],
    });

    // straight-through gradients are checked against differences of the
    // relaxed surrogate that shares their noise
    let noise = gumbel::gumbel_noise(rng, 8);
    let w = rand(rng, &[2, 4]);
    cases.push(Case {
        op: "straight_through",
        program: Box::new(move |t, v| {
            let y = t.gumbel_softmax(v[0], &noise, 0.7)?;
            readout(t, y, &w)
        }),
        inputs: vec![rand(rng, &[2, 4])],
    });
    Ok(cases)
}

fn random_pose_label(rng: &mut Rng) -> Result<TaskLabel> {
    let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let n = loss::norm(&q);
    TaskLabel::pose(
        [rng.normal(), rng.normal(), rng.normal()],
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
    )
}

/// Reduced configuration for the whole-model check: 16×16 inputs, three
/// backbone stages, two recurrent steps.
pub fn small_config(task: Task) -> Config {
    let mut c = Config::desk(task);
    c.model.image_size = 16;
    c.train.crop_size = 16;
    c.model.backbone_channels = vec![4, 6, 8];
    c.model.grid = 4;
    c.model.bank_channels = 6;
    c.model.hidden = 8;
    c.model.lstm_kernel_sizes = vec![1, 3];
    c.attention.kernel_sizes = vec![1, 3];
    c.model.n_steps = 2;
    c
}

/// Pose loss of the assembled model on a batch of four random images,
/// differentiated with respect to a random sample of parameter
/// coordinates. Parameters are redrawn uniformly in `[-1, 1]` so every
/// path carries a gradient well above the finite-difference noise floor;
/// selection uses the soft surrogate with frozen noise.
pub fn check_full_model(seed: u64, corrupted: bool) -> Result<GradCheckReport> {
    const BATCH: usize = 4;
    let c = small_config(Task::Pose);
    let mut model = Model::new(c.clone(), seed)?;
    let mut rng = Rng::new(seed, 0xF011);
    for p in model.store.params_mut() {
        let t = uniform_tensor(&mut rng, p.tensor.dims(), 1.0);
        p.tensor.values_mut().copy_from_slice(t.values());
    }
    let x = uniform_tensor(&mut rng, &[BATCH, c.model.image_size, c.model.image_size, 1], 1.0);
    let k = c.model.bank_size();
    let noise: Vec<Vec<f64>> = (0..c.model.n_steps)
        .map(|_| gumbel::gumbel_noise(&mut rng, BATCH * k))
        .collect();
    let labels: Vec<TaskLabel> = (0..BATCH).map(|_| random_pose_label(&mut rng)).collect::<Result<_>>()?;
    let inputs: Vec<Tensor> = model.store.params().iter().map(|p| p.tensor.clone()).collect();
    let coords: Vec<(usize, usize)> = (0..MODEL_COORDS)
        .map(|_| {
            let i = rng.below(inputs.len());
            (i, rng.below(inputs[i].len()))
        })
        .collect();
    let settings = ProbeSettings {
        mode: Mode::Train,
        tau: 1.0,
        relaxation: Relaxation::Soft,
    };
    grad_check_coords(
        |tape, v| {
            let bound = Bound::from_vars(v.to_vec());
            let mut store = model.store.clone();
            let xv = tape.constant(x.clone());
            let fwd = model
                .net
                .forward(tape, &bound, &mut store, xv, &mut NoiseSource::Frozen(&noise), settings)?;
            let l = loss::pose_loss(tape, fwd.prediction, &labels, 2.0)?;
            Ok(if corrupted { corrupt(tape, l) } else { l })
        },
        &inputs,
        &coords,
        STEP,
    )
}

/// Runs every check for one seed. `corrupt_op` doubles the analytic
/// gradient of the named check.
pub fn run_suite(seed: u64, corrupt_op: Option<&str>) -> Result<Vec<CheckResult>> {
    if let Some(op) = corrupt_op {
        if !OPS.contains(&op) {
            return Err(Error::config(alloc::format!("unknown gradient check {op}")));
        }
    }
    let mut rng = Rng::new(seed, 0xC4EC);
    let mut results = Vec::with_capacity(OPS.len());
    for case in primitive_cases(&mut rng)? {
        let corrupted = corrupt_op == Some(case.op);
        let program = case.program;
        let report = grad_check_report(
            |t, v| {
                let l = program(t, v)?;
                Ok(if corrupted { corrupt(t, l) } else { l })
            },
            &case.inputs,
            STEP,
        )?;
        results.push(CheckResult {
            op: case.op.into(),
            report,
            threshold: PRIMITIVE_THRESHOLD,
        });
    }
    results.push(CheckResult {
        op: "full_model".into(),
        report: check_full_model(seed, corrupt_op == Some("full_model"))?,
        threshold: MODEL_THRESHOLD,
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_op() {
        let results = run_suite(0, None).unwrap();
        let names: Vec<&str> = results.iter().map(|r| r.op.as_str()).collect();
        assert_eq!(names, OPS);
        for r in &results {
            assert!(r.passed(), "{} {:?}", r.op, r.report);
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        for op in ["dense", "full_model"] {
            let results = run_suite(1, Some(op)).unwrap();
            for r in &results {
                assert_eq!(r.passed(), r.op != op, "{} {:?}", r.op, r.report);
            }
            let bad = results.iter().find(|r| r.op == op).unwrap();
            assert!((bad.max_rel_err() - 1.0 / 3.0).abs() < 1e-3);
        }
        assert!(run_suite(1, Some("nope")).is_err());
    }
}
