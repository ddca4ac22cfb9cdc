use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::{train_staged, ExperimentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::network::{count_parameters, ModelConfig, ParamCount, StarFlow, TemporalMode};

/// One arm of the comparison: the model switches that differ from the base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    pub temporal_mode: TemporalMode,
    pub use_occlusion: bool,
    pub share_decoder: bool,
}

impl ArmSpec {
    pub fn new(temporal_mode: TemporalMode, use_occlusion: bool, share_decoder: bool) -> Self {
        let t = match temporal_mode {
            TemporalMode::None => "2F",
            TemporalMode::TrFlow => "TRFlow",
            TemporalMode::TrFeat => "TRFeat",
        };
        let o = if use_occlusion { "occ" } else { "noocc" };
        let s = if share_decoder { "shared" } else { "unshared" };
        ArmSpec {
            name: format!("{t}-{o}-{s}"),
            temporal_mode,
            use_occlusion,
            share_decoder,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            temporal_mode: self.temporal_mode,
            use_occlusion: self.use_occlusion,
            share_decoder: self.share_decoder,
            ..base.clone()
        }
    }

    /// Every combination of temporal connection, occlusion and sharing.
    pub fn full_matrix() -> Vec<ArmSpec> {
        let mut arms = Vec::new();
        for share in [true, false] {
            for mode in [TemporalMode::None, TemporalMode::TrFlow, TemporalMode::TrFeat] {
                for occ in [false, true] {
                    arms.push(ArmSpec::new(mode, occ, share));
                }
            }
        }
        arms
    }

    /// Two-frame without and with occlusion, then both temporal connections
    /// with occlusion, all scale-shared.
    pub fn directional() -> Vec<ArmSpec> {
        vec![
            ArmSpec::new(TemporalMode::None, false, true),
            ArmSpec::new(TemporalMode::None, true, true),
            ArmSpec::new(TemporalMode::TrFlow, true, true),
            ArmSpec::new(TemporalMode::TrFeat, true, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub base: ExperimentConfig,
    pub pretrain_iterations: usize,
    pub arms: Vec<ArmSpec>,
    pub seeds: Vec<u64>,
    /// Frames used at evaluation time.
    pub eval_frames: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            base: ExperimentConfig::default(),
            pretrain_iterations: 2000,
            arms: ArmSpec::directional(),
            seeds: vec![0, 1, 2],
            eval_frames: 4,
        }
    }
}

/// Parameter columns of one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub arm: String,
    pub counts: ParamCount,
    /// Percentage change of the total relative to the first arm.
    pub relative: f64,
}

impl ParamRow {
    pub fn table(base: &ModelConfig, arms: &[ArmSpec]) -> Vec<ParamRow> {
        let counts: Vec<ParamCount> = arms.iter().map(|a| count_parameters(&a.apply(base))).collect();
        let reference = counts.first().map_or(1, |c| c.total) as f64;
        arms.iter()
            .zip(counts)
            .map(|(a, c)| ParamRow {
                arm: a.name.clone(),
                relative: 100.0 * (c.total as f64 - reference) / reference,
                counts: c,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub params: ParamRow,
    pub per_seed: Vec<MetricReport>,
    /// Per-metric median over seeds.
    pub median: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub eval_frames: usize,
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn median_report(reports: &[MetricReport]) -> MetricReport {
    let col = |f: fn(&MetricReport) -> Option<f64>| median(reports.iter().filter_map(f).collect());
    MetricReport {
        samples: reports.first().map_or(0, |r| r.samples),
        epe_all: col(|r| r.epe_all),
        epe_noc: col(|r| r.epe_noc),
        epe_occ: col(|r| r.epe_occ),
        fl_all: col(|r| r.fl_all),
        occ_f1: col(|r| r.occ_f1),
    }
}

impl AblationReport {
    pub fn row(&self, arm: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.params.arm == arm)
    }

    /// Fixed-width table with parameter and median metric columns.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".into(), |v| format!("{v:.3}"));
        let mut s = format!(
            "{:<22} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8} {:>7}\n",
            "arm", "params", "relative", "epe_all", "epe_noc", "epe_occ", "fl_all", "occ_f1"
        );
        for r in &self.rows {
            let m = &r.median;
            s.push_str(&format!(
                "{:<22} {:>9} {:>+8.2}% {:>8} {:>8} {:>8} {:>8} {:>7}\n",
                r.params.arm,
                r.params.counts.total,
                r.params.relative,
                fmt(m.epe_all),
                fmt(m.epe_noc),
                fmt(m.epe_occ),
                fmt(m.fl_all),
                fmt(m.occ_f1),
            ));
        }
        s
    }
}

/// Trains every arm for every seed (pretraining then multi-frame) and
/// evaluates on `test`. `progress` sees each trained model and its report.
pub fn run_ablation(
    cfg: &AblationConfig,
    train_set: &Dataset,
    test: &Dataset,
    mut progress: impl FnMut(&ArmSpec, u64, &StarFlow, &MetricReport),
) -> Result<AblationReport> {
    if cfg.arms.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one arm and one seed".into()));
    }
    let params = ParamRow::table(&cfg.base.model, &cfg.arms);
    let mut rows = Vec::with_capacity(cfg.arms.len());
    for (arm, prow) in cfg.arms.iter().zip(params) {
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let mut model = StarFlow::new(arm.apply(&cfg.base.model), seed)?;
            let tcfg = super::TrainConfig {
                seed,
                ..cfg.base.train.clone()
            };
            train_staged(&mut model, train_set, &tcfg, cfg.pretrain_iterations)?;
            let report = evaluate(&model, test, cfg.eval_frames)?.summary;
            progress(arm, seed, &model, &report);
            per_seed.push(report);
        }
        rows.push(AblationRow {
            params: prow,
            median: median_report(&per_seed),
            per_seed,
        });
    }
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        eval_frames: cfg.eval_frames,
        rows,
    })
}
