//! Evaluation metrics: endpoint error, outlier percentage, occlusion F1.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outlier threshold in pixels.
pub const FL_THRESHOLD: f64 = 3.0;
pub const OCC_THRESHOLD: f64 = 0.5;

fn endpoint_errors(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "epe",
            "shape",
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let (b, c, h, w) = pred.dims4("epe")?;
    if c != 2 {
        return Err(Error::dim("epe", "channels", 2, c));
    }
    let hw = h * w;
    let (p, g) = (pred.data(), gt.data());
    Ok((0..b * hw)
        .map(|i| {
            let (bi, px) = (i / hw, i % hw);
            let du = p[bi * 2 * hw + px] - g[bi * 2 * hw + px];
            let dv = p[(bi * 2 + 1) * hw + px] - g[(bi * 2 + 1) * hw + px];
            (du * du + dv * dv).sqrt()
        })
        .collect())
}

fn mask_values(mask: Option<&Tensor>, n: usize) -> Result<Option<Vec<bool>>> {
    match mask {
        None => Ok(None),
        Some(m) if m.numel() == n => Ok(Some(m.data().iter().map(|&v| v > 0.5).collect())),
        Some(m) => Err(Error::dim("mask", "numel", n, m.numel())),
    }
}

/// Mean endpoint error over the masked pixels, `None` when the mask is empty.
pub fn epe(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<Option<f64>> {
    let errs = endpoint_errors(pred, gt)?;
    let mask = mask_values(mask, errs.len())?;
    let (sum, count) = errs
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.as_ref().is_none_or(|m| m[*i]))
        .fold((0.0, 0usize), |(s, c), (_, e)| (s + e, c + 1));
    Ok((count > 0).then(|| sum / count as f64))
}

/// Percentage of valid pixels whose endpoint error exceeds 3 px.
pub fn fl_all(pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>) -> Result<Option<f64>> {
    let errs = endpoint_errors(pred, gt)?;
    let mask = mask_values(valid, errs.len())?;
    let (out, count) = errs
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.as_ref().is_none_or(|m| m[*i]))
        .fold((0usize, 0usize), |(o, c), (_, &e)| (o + usize::from(e > FL_THRESHOLD), c + 1));
    Ok((count > 0).then(|| 100.0 * out as f64 / count as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// F1 of the positive class; 1 when there are neither actual nor
    /// predicted positives.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

pub fn occlusion_confusion(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<Confusion> {
    if pred.numel() != gt.numel() {
        return Err(Error::dim("occlusion_f1", "numel", gt.numel(), pred.numel()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p > threshold, g > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn occlusion_f1(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64> {
    Ok(occlusion_confusion(pred, gt, threshold)?.f1())
}

/// One evaluation summary. Absent values stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub samples: usize,
    pub epe_all: Option<f64>,
    pub epe_noc: Option<f64>,
    pub epe_occ: Option<f64>,
    pub fl_all: Option<f64>,
    pub occ_f1: Option<f64>,
}

impl MetricReport {
    /// `key=value` lines; absent values are written as `NA`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        writeln!(s, "samples={}", self.samples).unwrap();
        writeln!(s, "epe_all={}", fmt(self.epe_all)).unwrap();
        writeln!(s, "epe_noc={}", fmt(self.epe_noc)).unwrap();
        writeln!(s, "epe_occ={}", fmt(self.epe_occ)).unwrap();
        writeln!(s, "fl_all={}", fmt(self.fl_all)).unwrap();
        writeln!(s, "occ_f1={}", fmt(self.occ_f1)).unwrap();
        s
    }
}

/// Accumulates per-pixel statistics over many samples so that region EPEs
/// are pixel-weighted means over the whole set.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    samples: usize,
    all: (f64, usize),
    noc: (f64, usize),
    occ: (f64, usize),
    outliers: (usize, usize),
    confusion: Option<Confusion>,
}

impl MetricAccumulator {
    /// `occ_gt` is `[B, 1, H, W]` binary; `occ_pred` probabilities when the
    /// model predicts occlusion.
    pub fn add(
        &mut self,
        pred: &Tensor,
        gt: &Tensor,
        occ_gt: &Tensor,
        occ_pred: Option<&Tensor>,
    ) -> Result<()> {
        let errs = endpoint_errors(pred, gt)?;
        if occ_gt.numel() != errs.len() {
            return Err(Error::dim("metrics", "occlusion mask", errs.len(), occ_gt.numel()));
        }
        self.samples += pred.shape()[0];
        for (&e, &o) in errs.iter().zip(occ_gt.data()) {
            self.all.0 += e;
            self.all.1 += 1;
            let region = if o > 0.5 { &mut self.occ } else { &mut self.noc };
            region.0 += e;
            region.1 += 1;
            self.outliers.0 += usize::from(e > FL_THRESHOLD);
            self.outliers.1 += 1;
        }
        if let Some(p) = occ_pred {
            let c = occlusion_confusion(p, occ_gt, OCC_THRESHOLD)?;
            let acc = self.confusion.get_or_insert_with(Confusion::default);
            acc.tp += c.tp;
            acc.fp += c.fp;
            acc.fn_ += c.fn_;
            acc.tn += c.tn;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
        MetricReport {
            samples: self.samples,
            epe_all: mean(self.all),
            epe_noc: mean(self.noc),
            epe_occ: mean(self.occ),
            fl_all: (self.outliers.1 > 0)
                .then(|| 100.0 * self.outliers.0 as f64 / self.outliers.1 as f64),
            occ_f1: self.confusion.map(|c| c.f1()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, u: f64, v: f64) -> Tensor {
        let mut d = vec![u; h * w];
        d.extend(vec![v; h * w]);
        Tensor::new(&[1, 2, h, w], d).unwrap()
    }

    #[test]
    fn epe_basics() {
        let gt = field(4, 4, 1.0, -1.0);
        assert_eq!(epe(&gt, &gt, None).unwrap(), Some(0.0));
        assert_eq!(epe(&field(4, 4, 1.0, 0.0), &field(4, 4, 1.0, 1.0), None).unwrap(), Some(1.0));
        let empty = Tensor::zeros(&[1, 1, 4, 4]);
        assert_eq!(epe(&gt, &gt, Some(&empty)).unwrap(), None);
    }

    #[test]
    fn fl_all_basics() {
        let gt = field(4, 4, 0.0, 0.0);
        assert_eq!(fl_all(&gt, &gt, None).unwrap(), Some(0.0));
        assert_eq!(fl_all(&field(4, 4, 4.0, 0.0), &gt, None).unwrap(), Some(100.0));
        // half the pixels at 5 px
        let mut d = vec![0.0; 32];
        d[..8].fill(5.0);
        let pred = Tensor::new(&[1, 2, 4, 4], d).unwrap();
        assert_eq!(fl_all(&pred, &gt, None).unwrap(), Some(50.0));
    }

    #[test]
    fn f1_from_counts() {
        let c = Confusion { tp: 2, fp: 1, fn_: 1, tn: 0 };
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(Confusion::default().f1(), 1.0);
    }

    #[test]
    fn f1_all_negative_prediction() {
        let gt = Tensor::new(&[1, 1, 1, 4], vec![1., 0., 1., 0.]).unwrap();
        let pred = Tensor::full(&[1, 1, 1, 4], 0.1);
        assert_eq!(occlusion_f1(&pred, &gt, 0.5).unwrap(), 0.0);
        let exact = Tensor::new(&[1, 1, 1, 4], vec![0.9, 0.2, 0.7, 0.4]).unwrap();
        assert_eq!(occlusion_f1(&exact, &gt, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn report_key_values_mark_absent() {
        let r = MetricReport {
            samples: 1,
            epe_all: Some(1.5),
            ..Default::default()
        };
        let s = r.to_key_values();
        assert!(s.contains("epe_all=1.500000"));
        assert!(s.contains("occ_f1=NA"));
    }
}
