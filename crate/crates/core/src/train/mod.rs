//! Optimisation loop, evaluation and the ablation harness.

mod ablation;
mod batch;
mod eval;
mod optim;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{
    run_ablation, AblationConfig, AblationReport, AblationRow, ArmSpec, ParamRow,
};
pub use batch::Batch;
pub use eval::{evaluate, full_resolution, zero_flow_baseline, Evaluation, PairPrediction};
pub use optim::{clip_grad_norm, optimizer_step, Adam, AdamConfig, AdamState, LrSchedule};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{sequence_loss, LossWeights, Supervision};
use crate::metrics::MetricReport;
use crate::network::{ModelConfig, StarFlow};
use crate::param::Binder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Two-frame windows; the temporal state is never valid.
    Pretrain2frame,
    #[default]
    Multiframe,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Pretrain2frame => "pretrain_2frame",
            Stage::Multiframe => "multiframe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub halve_start: usize,
    pub halve_period: usize,
    /// Frames per training window in the multi-frame stage.
    pub seq_len: usize,
    pub seed: u64,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    /// Overrides the dataset's annotation flag.
    pub supervision: Option<Supervision>,
    /// Validation interval in iterations; 0 disables.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Multiframe,
            iterations: 2000,
            batch_size: 4,
            learning_rate: 1e-4,
            halve_start: 1000,
            halve_period: 500,
            seq_len: 4,
            seed: 0,
            grad_clip: 10.0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            supervision: None,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn window(&self) -> usize {
        match self.stage {
            Stage::Pretrain2frame => 2,
            Stage::Multiframe => self.seq_len,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.learning_rate,
            halve_start: self.halve_start,
            halve_period: self.halve_period,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be >= 0".into()));
        }
        if self.halve_period == 0 {
            return Err(Error::Config("halve_period must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// Model and training settings of one run, as stored in config files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub validations: Vec<(usize, MetricReport)>,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("iteration,loss,lr\n");
        for p in &self.curve {
            s.push_str(&format!("{},{:e},{:e}\n", p.iteration, p.loss, p.lr));
        }
        s
    }
}

/// Loss weights with the model's default level weights filled in.
pub fn resolve_weights(weights: &LossWeights, model: &ModelConfig) -> LossWeights {
    let mut w = weights.clone();
    if w.alphas.is_empty() {
        w.alphas = model.default_alphas();
    }
    w
}

/// Trains `model` in place. On a non-finite loss or gradient the model is
/// left at its last finite state, written to `diagnostic` when given, and a
/// divergence error is returned.
pub fn train(
    model: &mut StarFlow,
    ds: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
    diagnostic: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let window = cfg.window();
    if ds.frames() < window {
        return Err(Error::Contract(format!(
            "sequences have {} frames, training windows need {window}",
            ds.frames()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    model
        .config
        .check_image_size(ds.manifest.height, ds.manifest.width)?;
    let weights = resolve_weights(&cfg.loss, &model.config);
    let supervision = cfg.supervision.unwrap_or(ds.manifest.supervision);
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut outcome = TrainOutcome::default();

    let diverge = |model: &StarFlow, iteration: usize, reason: String| -> Error {
        if let Some(path) = diagnostic {
            let meta = CheckpointMeta {
                iteration,
                stage: cfg.stage.label().into(),
                diagnostic: Some(reason.clone()),
            };
            // best effort: the divergence itself is the error reported
            let _ = checkpoint::save(model, &meta, path);
        }
        Error::Divergence { iteration, reason }
    };

    for it in 0..cfg.iterations {
        let lr = schedule.at(it);
        let items: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let s = rng.random_range(0..ds.len());
                (s, rng.random_range(0..=ds.frames() - window))
            })
            .collect();
        let batch = Batch::gather(ds, &items, window)?;
        let gts: Vec<_> = batch
            .pyramids(model.config.levels, model.config.use_occlusion)?
            .into_iter()
            .map(Some)
            .collect();
        let (loss, grads) = {
            let b = Binder::trainable(&model.params);
            let out = model.forward_sequence(&b, &batch.frames)?;
            let finite = out.steps.iter().flat_map(|s| &s.levels).all(|l| {
                l.flow.tensor().data().iter().all(|v| v.is_finite())
                    && l.occ.as_ref().is_none_or(|o| o.tensor().data().iter().all(|v| v.is_finite()))
            });
            if !finite {
                return Err(diverge(model, it, "non-finite prediction".into()));
            }
            let terms = sequence_loss(&out.steps, &gts, &weights, supervision)?;
            let loss = terms.total.item();
            if !loss.is_finite() {
                return Err(diverge(model, it, format!("loss is {loss}")));
            }
            terms.total.backward()?;
            (loss, b.gradients())
        };
        model.params.zero_grad();
        model.params.accumulate(&grads);
        let grad_norm = if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut model.params, cfg.grad_clip)
        } else {
            model.params.grad_norm()
        };
        if let Err(Error::Divergence { reason, .. }) = adam.step(&mut model.params, lr) {
            return Err(diverge(model, it, reason));
        }
        outcome.curve.push(CurvePoint {
            iteration: it,
            loss,
            lr,
            grad_norm,
        });
        if let Some(v) = validation {
            if cfg.validate_every > 0 && (it + 1) % cfg.validate_every == 0 {
                let report = evaluate(model, v, window.min(v.frames()))?.summary;
                outcome.validations.push((it + 1, report));
            }
        }
    }
    Ok(outcome)
}

/// Two-frame pretraining followed by multi-frame training, both with the
/// settings of `cfg` apart from the stage and iteration counts.
pub fn train_staged(
    model: &mut StarFlow,
    ds: &Dataset,
    cfg: &TrainConfig,
    pretrain_iterations: usize,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let pre = TrainConfig {
        stage: Stage::Pretrain2frame,
        iterations: pretrain_iterations,
        ..cfg.clone()
    };
    let first = train(model, ds, &pre, None, None)?;
    let multi = TrainConfig {
        stage: Stage::Multiframe,
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let second = train(model, ds, &multi, None, None)?;
    Ok((first, second))
}
