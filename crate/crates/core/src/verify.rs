//! Finite-difference verification of every differentiable op and of the
//! full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow_ops::{correlation, warp, FlowField};
use crate::gradcheck::{central_difference, check, relative_error, Coverage, GradReport, FD_STEP};
use crate::loss::{flow_loss, occ_loss, sequence_loss, GtPyramid, LossWeights, OccLossForm, Supervision};
use crate::network::{ModelConfig, OcclusionMap, StarFlow};
use crate::param::Binder;
use crate::tensor::{no_grad, Conv2dOpts, Tensor};

/// Tolerance for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the full model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Name of the end-to-end entry in a report.
pub const END_TO_END: &str = "end_to_end";

/// Every op the suite checks, in report order.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "leaky_relu",
    "sigmoid",
    "concat",
    "narrow",
    "upsample2x",
    "avgpool2x",
    "conv2d",
    "conv2d_strided",
    "conv2d_dilated",
    "conv2d_1x1",
    "warp",
    "correlation",
    "flow_loss",
    "occ_loss",
];

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Scalars perturbed per input (op suite) or in total (model).
    pub samples: usize,
    pub seed: u64,
    /// Op whose backward is deliberately scaled, to exercise the harness.
    pub fault: Option<String>,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub ops: Vec<GradReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(GradReport::passed)
    }

    pub fn failures(&self) -> Vec<&GradReport> {
        self.ops.iter().filter(|r| !r.passed()).collect()
    }

    /// One line per op: name, verdict, worst relative error, scalars checked.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.ops {
            s.push_str(&format!(
                "{:<16} {} max_rel_err={:.3e} tol={:.0e} checked={}\n",
                r.name,
                if r.passed() { "PASS" } else { "FAIL" },
                r.max_rel_err,
                r.tolerance,
                r.checked
            ));
        }
        s
    }
}

/// Identity whose backward scales the incoming gradient.
fn scaled_backward(x: &Tensor, factor: f64) -> Tensor {
    Tensor::from_op(
        x.shape().to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![Some(g.iter().map(|v| v * factor).collect())]),
    )
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Values kept at least `gap` away from zero, for kinked ops.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape matches")
}

/// Flow values whose fractional part stays clear of the bilinear kinks.
fn smooth_flow(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| rng.random_range(-2i32..2) as f64 + rng.random_range(0.1..0.9))
        .collect();
    Tensor::new(shape, v).expect("shape matches")
}

type OpFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Reduces a tensor to a scalar with fixed random weights so every output
/// element receives a distinct gradient.
fn weighted_sum(t: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, t.shape(), -1.0, 1.0);
    Ok(t.mul(&w)?.sum())
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor>, OpFn)> {
    let s4 = [2, 3, 4, 6];
    let reduce_seed = rng.random::<u64>();
    let r = move |t: Tensor| weighted_sum(&t, reduce_seed);
    Ok(match name {
        "add" => (
            vec![uniform(rng, &s4, -1.0, 1.0), uniform(rng, &s4, -1.0, 1.0)],
            Box::new(move |v| r(v[0].add(&v[1])?)),
        ),
        "sub" => (
            vec![uniform(rng, &s4, -1.0, 1.0), uniform(rng, &s4, -1.0, 1.0)],
            Box::new(move |v| r(v[0].sub(&v[1])?)),
        ),
        "mul" => (
            vec![uniform(rng, &s4, -1.0, 1.0), uniform(rng, &s4, -1.0, 1.0)],
            Box::new(move |v| r(v[0].mul(&v[1])?)),
        ),
        "scale" => (vec![uniform(rng, &s4, -1.0, 1.0)], Box::new(move |v| r(v[0].scale(-1.7)))),
        "sum" => (
            vec![uniform(rng, &s4, -1.0, 1.0)],
            Box::new(|v| {
                let s = v[0].sum();
                Ok(s.mul(&s)?)
            }),
        ),
        "mean" => (
            vec![uniform(rng, &s4, -1.0, 1.0)],
            Box::new(|v| {
                let m = v[0].mean();
                Ok(m.mul(&m)?)
            }),
        ),
        "leaky_relu" => (vec![off_zero(rng, &s4, 0.05)], Box::new(move |v| r(v[0].leaky_relu(0.1)))),
        "sigmoid" => (vec![uniform(rng, &s4, -3.0, 3.0)], Box::new(move |v| r(v[0].sigmoid()))),
        "concat" => (
            vec![uniform(rng, &[2, 2, 4, 6], -1.0, 1.0), uniform(rng, &s4, -1.0, 1.0)],
            Box::new(move |v| r(Tensor::concat(&[&v[0], &v[1]], 1)?)),
        ),
        "narrow" => (vec![uniform(rng, &s4, -1.0, 1.0)], Box::new(move |v| r(v[0].narrow(1, 1, 2)?))),
        "upsample2x" => (vec![uniform(rng, &s4, -1.0, 1.0)], Box::new(move |v| r(v[0].upsample2x()?))),
        "avgpool2x" => (vec![uniform(rng, &s4, -1.0, 1.0)], Box::new(move |v| r(v[0].avgpool2x()?))),
        "conv2d" | "conv2d_strided" | "conv2d_dilated" | "conv2d_1x1" => {
            let (k, opts) = match name {
                "conv2d" => (3, Conv2dOpts::same(3, 1)),
                "conv2d_strided" => (3, Conv2dOpts { stride: 2, padding: 1, dilation: 1 }),
                "conv2d_dilated" => (3, Conv2dOpts::same(3, 2)),
                _ => (1, Conv2dOpts::default()),
            };
            (
                vec![
                    uniform(rng, &[2, 3, 5, 6], -1.0, 1.0),
                    uniform(rng, &[4, 3, k, k], -1.0, 1.0),
                    uniform(rng, &[4], -1.0, 1.0),
                ],
                Box::new(move |v| r(v[0].conv2d(&v[1], Some(&v[2]), opts)?)),
            )
        }
        "warp" => (
            vec![uniform(rng, &[2, 3, 5, 6], -1.0, 1.0), smooth_flow(rng, &[2, 2, 5, 6])],
            Box::new(move |v| r(warp(&v[0], &FlowField::new(v[1].clone())?)?)),
        ),
        "correlation" => (
            vec![uniform(rng, &[2, 3, 5, 6], -1.0, 1.0), uniform(rng, &[2, 3, 5, 6], -1.0, 1.0)],
            Box::new(move |v| r(correlation(&v[0], &v[1], 2)?)),
        ),
        "flow_loss" => {
            let gt = off_zero(rng, &[2, 2, 4, 5], 0.3);
            (
                vec![uniform(rng, &[2, 2, 4, 5], -0.2, 0.2)],
                Box::new(move |v| flow_loss(&FlowField::new(v[0].clone())?, &gt)),
            )
        }
        "occ_loss" => {
            let n = 2 * 4 * 5;
            let gt = Tensor::new(
                &[2, 1, 4, 5],
                (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect(),
            )?;
            (
                vec![uniform(rng, &[2, 1, 4, 5], 0.1, 0.9)],
                Box::new(move |v| occ_loss(&OcclusionMap::new(v[0].clone())?, &gt, OccLossForm::Standard)),
            )
        }
        other => return Err(Error::Contract(format!("unknown op {other}"))),
    })
}

/// Checks one op. With `fault`, the op's output gradient is scaled by 1.5
/// before it reaches the inputs.
pub fn check_op(name: &str, opts: &VerifyOptions) -> Result<GradReport> {
    let idx = OPS
        .iter()
        .position(|&o| o == name)
        .ok_or_else(|| Error::Contract(format!("unknown op {name}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1000).wrapping_add(idx as u64));
    let (inputs, f) = op_case(name, &mut rng)?;
    let faulty = opts.fault.as_deref() == Some(name);
    let coverage = if opts.samples == 0 {
        Coverage::All
    } else {
        Coverage::Sample {
            per_input: opts.samples,
            seed: opts.seed,
        }
    };
    if faulty {
        // the fault only alters the backward pass; forward values are unchanged
        let g = move |v: &[Tensor]| -> Result<Tensor> {
            let wrapped: Vec<Tensor> = v.iter().map(|t| scaled_backward(t, 1.5)).collect();
            f(&wrapped)
        };
        check(name, &inputs, &g, OP_TOLERANCE, coverage)
    } else {
        check(name, &inputs, &*f, OP_TOLERANCE, coverage)
    }
}

/// Finite differences of the training loss of an `N = 3` sequence with
/// respect to `samples` randomly chosen parameters. The backward-flow pass
/// is differentiated so the loss is a smooth function of every parameter.
pub fn check_model(config: &ModelConfig, opts: &VerifyOptions) -> Result<GradReport> {
    let config = ModelConfig {
        backward_flow_grad: true,
        ..config.clone()
    };
    let mut model = StarFlow::new(config, opts.seed)?;
    let side = model.config.size_multiple().max(16);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let frames: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[1, 3, side, side], 0.0, 1.0)).collect();
    let gts: Vec<Option<GtPyramid>> = (0..2)
        .map(|_| {
            let flow = uniform(&mut rng, &[1, 2, side, side], -2.0, 2.0);
            let occ = Tensor::new(
                &[1, 1, side, side],
                (0..side * side).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect(),
            )?;
            GtPyramid::build(&flow, model.config.use_occlusion.then_some(&occ), model.config.levels).map(Some)
        })
        .collect::<Result<_>>()?;
    let weights = LossWeights {
        alphas: model.config.default_alphas(),
        ..LossWeights::default()
    };
    let loss_of = |m: &StarFlow, b: &Binder| -> Result<Tensor> {
        let out = m.forward_sequence(b, &frames)?;
        Ok(sequence_loss(&out.steps, &gts, &weights, Supervision::AllSteps)?.total)
    };

    let analytic = {
        let b = Binder::trainable(&model.params);
        loss_of(&model, &b)?.backward()?;
        b.gradients()
    };
    let mut grad_of = vec![Vec::new(); model.params.len()];
    for (id, g) in analytic {
        grad_of[id.index()] = g;
    }

    // (parameter index, scalar index) pairs, drawn uniformly over scalars
    let sizes: Vec<usize> = model.params.iter().map(|(_, p)| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    let n = if opts.samples == 0 { total } else { opts.samples.min(total) };
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, total, n).into_vec();
    picks.sort_unstable();

    let mut report = GradReport {
        name: END_TO_END.into(),
        max_rel_err: 0.0,
        checked: 0,
        tolerance: MODEL_TOLERANCE,
    };
    for flat in picks {
        let (mut pi, mut si) = (0, flat);
        while si >= sizes[pi] {
            si -= sizes[pi];
            pi += 1;
        }
        let original = model.params.iter_mut().nth(pi).expect("index in range").value[si];
        let numeric = central_difference(FD_STEP, |delta| {
            model.params.iter_mut().nth(pi).expect("index in range").value[si] = original + delta;
            let b = Binder::frozen(&model.params);
            no_grad(|| loss_of(&model, &b)).map(|t| t.item())
        })?;
        model.params.iter_mut().nth(pi).expect("index in range").value[si] = original;
        let a = grad_of[pi].get(si).copied().unwrap_or(0.0);
        let err = relative_error(a, numeric);
        report.max_rel_err = if err.is_nan() { f64::INFINITY } else { report.max_rel_err.max(err) };
        report.checked += 1;
    }
    Ok(report)
}

/// Every op once, then the full model.
pub fn run_suite(config: &ModelConfig, opts: &VerifyOptions) -> Result<VerifyReport> {
    if let Some(f) = &opts.fault {
        if !OPS.contains(&f.as_str()) {
            return Err(Error::Contract(format!("unknown op {f} for fault injection")));
        }
    }
    let mut ops = OPS.iter().map(|o| check_op(o, opts)).collect::<Result<Vec<_>>>()?;
    ops.push(check_model(config, opts)?);
    Ok(VerifyReport { ops })
}
