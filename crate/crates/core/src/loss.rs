//! Multi-frame, multi-scale, multi-task training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_ops::FlowField;
use crate::network::{LevelOutput, OcclusionMap, PairOutput};
use crate::tensor::Tensor;

/// Lower clamp for probabilities inside logarithms.
pub const LOG_CLAMP: f64 = 1e-7;

/// How the two arguments of the weighted cross-entropy are arranged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccLossForm {
    /// `gt * log(pred) + (1 - gt) * log(1 - pred)`.
    #[default]
    Standard,
    /// `pred * log(gt) + (1 - pred) * log(1 - gt)`, with the ground truth
    /// clamped away from 0 and 1. Kept only for inspection.
    SwappedArguments,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LambdaMode {
    Fixed { lambda: f64 },
    /// Rescaled every evaluation so that `lambda * occ = fraction * flow`.
    Auto { fraction: f64 },
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Fixed { lambda: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Every image pair carries ground truth.
    #[default]
    AllSteps,
    /// Only the last pair is annotated; the others contribute nothing.
    LastStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Per-level weights, coarse to fine. Empty means "model default".
    pub alphas: Vec<f64>,
    pub lambda: LambdaMode,
    pub occ_form: OccLossForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alphas: Vec::new(),
            lambda: LambdaMode::default(),
            occ_form: OccLossForm::Standard,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config("loss alphas must be > 0".into()));
        }
        match self.lambda {
            LambdaMode::Fixed { lambda } if !(lambda >= 0.0) => {
                Err(Error::Config("lambda must be >= 0".into()))
            }
            LambdaMode::Auto { fraction } if !(fraction >= 0.0) => {
                Err(Error::Config("auto lambda fraction must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `sum_x ||pred(x) - gt(x)||_2` over all pixels and batch items.
///
/// The gradient at a zero-length error vector is taken as zero.
pub fn flow_loss(pred: &FlowField, gt: &Tensor) -> Result<Tensor> {
    let p = pred.tensor();
    if p.shape() != gt.shape() {
        return Err(Error::dim(
            "flow_loss",
            "shape",
            format!("{:?}", p.shape()),
            format!("{:?}", gt.shape()),
        ));
    }
    let (b, _, h, w) = p.dims4("flow_loss")?;
    let hw = h * w;
    let (pd, gd) = (p.data(), gt.data());
    let mut unit = vec![0.0; b * 2 * hw];
    let mut total = 0.0;
    for bi in 0..b {
        let (u, v) = (bi * 2 * hw, (bi * 2 + 1) * hw);
        for i in 0..hw {
            let du = pd[u + i] - gd[u + i];
            let dv = pd[v + i] - gd[v + i];
            let n = (du * du + dv * dv).sqrt();
            total += n;
            if n > 0.0 {
                unit[u + i] = du / n;
                unit[v + i] = dv / n;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![total],
        vec![p.clone()],
        Box::new(move |g| vec![Some(unit.iter().map(|u| u * g[0]).collect())]),
    ))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

/// Derivative of `ln(clamp(p))`, zero where the clamp is active.
fn dlog(p: f64) -> f64 {
    if (LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&p) {
        1.0 / p
    } else {
        0.0
    }
}

/// Class-balanced binary cross-entropy between an occlusion map and a binary
/// ground truth, `-1/2 sum (w * gt log p + w_bar * (1 - gt) log(1 - p))`
/// with `w = HW / (sum p + sum gt)` and `w_bar = HW / (sum(1-p) + sum(1-gt))`
/// computed per batch item from the current prediction.
///
/// The balancing weights are differentiated through.
pub fn occ_loss(pred: &OcclusionMap, gt: &Tensor, form: OccLossForm) -> Result<Tensor> {
    let p = pred.tensor();
    if p.shape() != gt.shape() {
        return Err(Error::dim(
            "occ_loss",
            "shape",
            format!("{:?}", p.shape()),
            format!("{:?}", gt.shape()),
        ));
    }
    if let Some(bad) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("occlusion probability {bad} outside [0, 1]")));
    }
    if let Some(bad) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("occlusion ground truth {bad} is not binary")));
    }
    let (b, _, h, w) = p.dims4("occ_loss")?;
    let hw = h * w;
    let n = hw as f64;
    let (pd, gd) = (p.data(), gt.data());
    let mut grad = vec![0.0; b * hw];
    let mut total = 0.0;
    for bi in 0..b {
        let ps = &pd[bi * hw..(bi + 1) * hw];
        let gs = &gd[bi * hw..(bi + 1) * hw];
        let sp: f64 = ps.iter().sum();
        let sg: f64 = gs.iter().sum();
        let wpos = n / (sp + sg).max(f64::MIN_POSITIVE);
        let wneg = n / ((n - sp) + (n - sg)).max(f64::MIN_POSITIVE);
        let gb = &mut grad[bi * hw..(bi + 1) * hw];
        match form {
            OccLossForm::Standard => {
                let a: f64 = ps.iter().zip(gs).map(|(&p, &g)| g * clamp_prob(p).ln()).sum();
                let c: f64 = ps
                    .iter()
                    .zip(gs)
                    .map(|(&p, &g)| (1.0 - g) * (1.0 - clamp_prob(p)).ln())
                    .sum();
                total += -0.5 * (wpos * a + wneg * c);
                for ((gi, &p), &g) in gb.iter_mut().zip(ps).zip(gs) {
                    let d = -wpos * wpos / n * a + wpos * g * dlog(p) + wneg * wneg / n * c
                        - wneg * (1.0 - g) * dlog(1.0 - p);
                    *gi = -0.5 * d;
                }
            }
            OccLossForm::SwappedArguments => {
                let a: f64 = ps.iter().zip(gs).map(|(&p, &g)| p * clamp_prob(g).ln()).sum();
                let c: f64 = ps
                    .iter()
                    .zip(gs)
                    .map(|(&p, &g)| (1.0 - p) * (1.0 - clamp_prob(g)).ln())
                    .sum();
                total += -0.5 * (wpos * a + wneg * c);
                for (gi, &g) in gb.iter_mut().zip(gs) {
                    let d = -wpos * wpos / n * a + wpos * clamp_prob(g).ln() + wneg * wneg / n * c
                        - wneg * (1.0 - clamp_prob(g)).ln();
                    *gi = -0.5 * d;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![total],
        vec![p.clone()],
        Box::new(move |g| vec![Some(grad.iter().map(|v| v * g[0]).collect())]),
    ))
}

/// 2x2 max pooling of a `[B, C, H, W]` constant.
fn maxpool2x(t: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4("maxpool2x")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("maxpool2x", "extent", "even", format!("{h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = t.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for p in 0..b * c {
        for y in 0..ho {
            for xx in 0..wo {
                let i = p * h * w + 2 * y * w + 2 * xx;
                out.push(x[i].max(x[i + 1]).max(x[i + w]).max(x[i + w + 1]));
            }
        }
    }
    Tensor::new(&[b, c, ho, wo], out)
}

/// Ground truth resampled to every prediction level, coarse to fine.
///
/// Flow is average-pooled with values halved per level; occlusion is
/// max-pooled, so a coarse pixel is occluded if any of its children is.
#[derive(Debug, Clone)]
pub struct GtPyramid {
    pub flows: Vec<Tensor>,
    pub occs: Option<Vec<Tensor>>,
}

impl GtPyramid {
    /// `flow` and `occ` are at input resolution; the finest prediction level
    /// sits at half of it.
    pub fn build(flow: &Tensor, occ: Option<&Tensor>, levels: usize) -> Result<Self> {
        let mut flows = Vec::with_capacity(levels);
        let mut f = FlowField::new(flow.detach())?;
        for _ in 0..levels {
            f = f.downsample()?;
            flows.push(f.tensor().clone());
        }
        flows.reverse();
        let occs = match occ {
            Some(o) => {
                let mut v = Vec::with_capacity(levels);
                let mut cur = o.detach();
                for _ in 0..levels {
                    cur = maxpool2x(&cur)?;
                    v.push(cur.clone());
                }
                v.reverse();
                Some(v)
            }
            None => None,
        };
        Ok(GtPyramid { flows, occs })
    }
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    /// Weighted flow part, per batch item and step.
    pub flow: f64,
    /// Weighted occlusion part before lambda, per batch item and step.
    pub occ: f64,
    pub lambda: f64,
}

fn level_terms(
    out: &LevelOutput,
    gt: &GtPyramid,
    level: usize,
    form: OccLossForm,
) -> Result<(Tensor, Option<Tensor>)> {
    let fl = flow_loss(&out.flow, &gt.flows[level])?;
    let oc = match (&out.occ, &gt.occs) {
        (Some(p), Some(g)) => Some(occ_loss(p, &g[level], form)?),
        _ => None,
    };
    Ok((fl, oc))
}

/// `(1/T) sum_t sum_l alpha_l (L_flow + lambda L_occ)`, averaged over the
/// batch. `T` is the number of image pairs.
pub fn sequence_loss(
    preds: &[PairOutput],
    gts: &[Option<GtPyramid>],
    weights: &LossWeights,
    supervision: Supervision,
) -> Result<LossTerms> {
    let steps = preds.len();
    if steps == 0 {
        return Err(Error::Contract("sequence_loss needs at least one step".into()));
    }
    if gts.len() != steps {
        return Err(Error::Contract(format!(
            "{} ground-truth entries for {steps} steps",
            gts.len()
        )));
    }
    let levels = preds[0].levels.len();
    if weights.alphas.len() != levels {
        return Err(Error::Contract(format!(
            "{} loss weights for {levels} prediction levels",
            weights.alphas.len()
        )));
    }
    let batch = preds[0].finest().flow.dims().0 as f64;

    let mut flow_sum: Option<Tensor> = None;
    let mut occ_sum: Option<Tensor> = None;
    for (t, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        let supervised = match supervision {
            Supervision::AllSteps => true,
            Supervision::LastStep => t + 1 == steps,
        };
        if !supervised {
            continue;
        }
        let gt = gt
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("missing ground truth for supervised step {t}")))?;
        if gt.flows.len() != levels {
            return Err(Error::Contract("ground-truth pyramid depth mismatch".into()));
        }
        for (l, out) in pred.levels.iter().enumerate() {
            let (fl, oc) = level_terms(out, gt, l, weights.occ_form)?;
            let alpha = weights.alphas[l];
            let fl = fl.scale(alpha);
            flow_sum = Some(match flow_sum {
                Some(s) => s.add(&fl)?,
                None => fl,
            });
            if let Some(oc) = oc {
                let oc = oc.scale(alpha);
                occ_sum = Some(match occ_sum {
                    Some(s) => s.add(&oc)?,
                    None => oc,
                });
            }
        }
    }
    let norm = 1.0 / (steps as f64 * batch);
    let flow_sum = flow_sum.expect("at least the last step is supervised");
    let flow_v = flow_sum.item() * norm;
    let (total, occ_v, lambda) = match occ_sum {
        Some(occ_sum) => {
            let occ_v = occ_sum.item() * norm;
            let lambda = match weights.lambda {
                LambdaMode::Fixed { lambda } => lambda,
                LambdaMode::Auto { fraction } if occ_v > 0.0 => fraction * flow_v / occ_v,
                LambdaMode::Auto { .. } => 0.0,
            };
            (flow_sum.add(&occ_sum.scale(lambda))?, occ_v, lambda)
        }
        None => (flow_sum, 0.0, 0.0),
    };
    Ok(LossTerms {
        total: total.scale(norm),
        flow: flow_v,
        occ: occ_v,
        lambda,
    })
}
