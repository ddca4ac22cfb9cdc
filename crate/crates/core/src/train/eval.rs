use serde::Serialize;

use super::batch::Batch;
use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::flow_ops::FlowField;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::network::StarFlow;
use crate::param::Binder;
use crate::tensor::{no_grad, Tensor};

const EVAL_BATCH: usize = 8;

/// Full-resolution prediction for the last pair of one evaluated window.
#[derive(Debug, Clone)]
pub struct PairPrediction {
    pub sequence: usize,
    pub flow: Image,
    pub occlusion: Option<Image>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub n_prime: usize,
    pub summary: MetricReport,
    #[serde(skip)]
    pub pairs: Vec<PairPrediction>,
}

/// Finest prediction brought to input resolution.
pub fn full_resolution(flow: &FlowField, occ: Option<&Tensor>) -> Result<(Tensor, Option<Tensor>)> {
    let f = flow.upsample()?.into_tensor();
    let o = occ.map(|o| o.upsample2x()).transpose()?;
    Ok((f, o))
}

/// Runs each sequence's last `n_prime` frames through the model and scores
/// only the final pair, so every `n_prime` is measured on the same pair.
pub fn evaluate(model: &StarFlow, ds: &Dataset, n_prime: usize) -> Result<Evaluation> {
    if n_prime < 2 {
        return Err(Error::Contract(format!("n_prime must be at least 2, got {n_prime}")));
    }
    if ds.frames() < n_prime {
        return Err(Error::Contract(format!(
            "sequences have {} frames, evaluation needs {n_prime}",
            ds.frames()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let start = ds.frames() - n_prime;
    let mut acc = MetricAccumulator::default();
    let mut pairs = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let items: Vec<(usize, usize)> = chunk.iter().map(|&s| (s, start)).collect();
        let batch = Batch::gather(ds, &items, n_prime)?;
        let (flow, occ) = no_grad(|| -> Result<_> {
            let b = Binder::frozen(&model.params);
            let out = model.forward_sequence(&b, &batch.frames)?;
            let last = out.steps.last().expect("n_prime >= 2").finest().clone();
            full_resolution(&last.flow, last.occ.as_ref().map(|o| o.tensor()))
        })?;
        let gt_flow = batch.flows.last().expect("n_prime >= 2");
        let gt_occ = batch.occlusions.last().expect("n_prime >= 2");
        acc.add(&flow, gt_flow, gt_occ, occ.as_ref())?;
        for (i, &seq) in chunk.iter().enumerate() {
            let f = Image::from_tensor(&flow, i)?;
            let o = occ.as_ref().map(|o| Image::from_tensor(o, i)).transpose()?;
            let mut one = MetricAccumulator::default();
            let t = |im: &Image| Image::batch(&[im]);
            one.add(
                &t(&f)?,
                &t(&Image::from_tensor(gt_flow, i)?)?,
                &t(&Image::from_tensor(gt_occ, i)?)?,
                o.as_ref().map(t).transpose()?.as_ref(),
            )?;
            pairs.push(PairPrediction {
                sequence: seq,
                flow: f,
                occlusion: o,
                report: one.report(),
            });
        }
    }
    Ok(Evaluation {
        n_prime,
        summary: acc.report(),
        pairs,
    })
}

/// Metrics of the all-zero flow prediction on the same pairs as [`evaluate`].
pub fn zero_flow_baseline(ds: &Dataset, n_prime: usize) -> Result<MetricReport> {
    if ds.frames() < n_prime || n_prime < 2 {
        return Err(Error::Contract("invalid n_prime".into()));
    }
    let t = ds.frames() - 2;
    let mut acc = MetricAccumulator::default();
    for s in &ds.sequences {
        let gt = Image::batch(&[&s.flows[t]])?;
        let zero = Tensor::zeros(gt.shape());
        acc.add(&zero, &gt, &Image::batch(&[&s.occlusions[t]])?, None)?;
    }
    Ok(acc.report())
}
