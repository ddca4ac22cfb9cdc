use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TemporalMode};
use super::layers::{Conv2d, ConvSpec};
use crate::error::{Error, Result};
use crate::flow_ops::{correlation, warp, FlowField};
use crate::param::{Binder, ParamId, ParamStore};
use crate::tensor::{no_grad, Conv2dOpts, Tensor};

/// Initial scale of the layers producing flow/occlusion residuals.
const RESIDUAL_HEAD_GAIN: f64 = 0.01;

/// Per-pixel occlusion probability `[B, 1, H, W]`, 1 = occluded.
#[derive(Debug, Clone)]
pub struct OcclusionMap(Tensor);

impl OcclusionMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4("occlusion map")?;
        if c != 1 {
            return Err(Error::dim("occlusion map", "channels", 1, c));
        }
        Ok(OcclusionMap(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Encoder features of one image, coarse to fine.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<Tensor>,
}

/// The temporal input of one image pair, aligned to the pair's first frame,
/// one tensor per level (coarse to fine).
#[derive(Debug, Clone)]
pub struct StarCellState {
    pub features: Vec<Tensor>,
    pub valid: bool,
}

impl StarCellState {
    /// Start-of-sequence state; reads as zeros.
    pub fn invalid() -> Self {
        StarCellState {
            features: Vec::new(),
            valid: false,
        }
    }
}

/// What one image pair hands to the next, still in the geometry of the
/// pair's first frame.
#[derive(Debug, Clone)]
pub enum TemporalCarry {
    None,
    /// Compressed penultimate estimator features per level, coarse to fine.
    Features(Vec<Tensor>),
    /// Finest-level forward flow.
    Flow(FlowField),
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub flow: FlowField,
    pub occ: Option<OcclusionMap>,
    /// Occlusion input for the next finer level (zeros without occlusion).
    pub occ_slot: Tensor,
    /// Compressed penultimate activations (TRFeat only).
    pub features: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub flow: FlowField,
    pub occ: Option<OcclusionMap>,
}

#[derive(Debug, Clone)]
pub struct PairOutput {
    /// Coarse to fine.
    pub levels: Vec<LevelOutput>,
    pub carry: TemporalCarry,
}

impl PairOutput {
    pub fn finest(&self) -> &LevelOutput {
        self.levels.last().expect("at least one level")
    }
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub steps: Vec<PairOutput>,
    /// Reversed-time passes run to align temporal state.
    pub backward_passes: usize,
    /// Steps that consumed a valid temporal state.
    pub temporal_steps: usize,
    /// Parameters touched while processing each step.
    pub touched: Vec<BTreeSet<ParamId>>,
}

/// Estimator, output head, context network and temporal compression of one
/// STaR cell instance.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub estimator: Vec<Conv2d>,
    pub head: Conv2d,
    pub context: Vec<Conv2d>,
    pub compress: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct StarFlow {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Two convolutions per level, finest first.
    encoder: Vec<(Conv2d, Conv2d)>,
    /// One 1x1 adapter per level, coarse to fine.
    adapters: Vec<Conv2d>,
    decoders: Vec<Decoder>,
}

impl StarFlow {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = config.kernel;
        let l_count = config.levels;

        let mut encoder = Vec::with_capacity(l_count);
        let mut cin = ModelConfig::IMAGE_CHANNELS;
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            let down = Conv2dOpts {
                stride: 2,
                padding: k / 2,
                dilation: 1,
            };
            let a = Conv2d::build(
                &mut params,
                &mut rng,
                &format!("encoder.level{i}.conv0"),
                ConvSpec::new(cin, w, k, down),
            )?;
            let b = Conv2d::build(
                &mut params,
                &mut rng,
                &format!("encoder.level{i}.conv1"),
                ConvSpec::new(w, w, k, Conv2dOpts::same(k, 1)),
            )?;
            encoder.push((a, b));
            cin = w;
        }

        // coarse to fine
        let mut adapters = Vec::with_capacity(l_count);
        for l in 0..l_count {
            let width = config.encoder_widths[l_count - 1 - l];
            adapters.push(Conv2d::build(
                &mut params,
                &mut rng,
                &format!("adapter.level{l}"),
                ConvSpec::new(width, config.feature_width, 1, Conv2dOpts::default()),
            )?);
        }

        let mut decoders = Vec::with_capacity(config.decoder_instances());
        for inst in 0..config.decoder_instances() {
            let prefix = if config.share_decoder {
                "decoder".to_string()
            } else {
                format!("decoder.level{inst}")
            };
            decoders.push(Self::build_decoder(&config, &mut params, &mut rng, &prefix)?);
        }

        Ok(StarFlow {
            config,
            params,
            encoder,
            adapters,
            decoders,
        })
    }

    fn build_decoder(
        config: &ModelConfig,
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
    ) -> Result<Decoder> {
        let k = config.kernel;
        let mut cin = config.estimator_in_channels();
        let mut estimator = Vec::new();
        for (j, &w) in config.estimator_widths.iter().enumerate() {
            estimator.push(Conv2d::build(
                params,
                rng,
                &format!("{prefix}.estimator.conv{j}"),
                ConvSpec::new(cin, w, k, Conv2dOpts::same(k, 1)),
            )?);
            cin = w;
        }
        // Weights reading the temporal input start at zero, so switching the
        // connection on leaves a two-frame model's output unchanged.
        let temporal = config.temporal_in_channels();
        if temporal > 0 {
            let p = params.get_mut(estimator[0].weight);
            let (cout, cin, kk) = (p.shape[0], p.shape[1], p.shape[2] * p.shape[3]);
            for co in 0..cout {
                p.value[(co * cin + cin - temporal) * kk..(co + 1) * cin * kk].fill(0.0);
            }
        }
        let last = config.penultimate_width();
        let head = Conv2d::build(
            params,
            rng,
            &format!("{prefix}.head"),
            ConvSpec::new(last, config.head_out_channels(), k, Conv2dOpts::same(k, 1))
                .gain(RESIDUAL_HEAD_GAIN),
        )?;
        let mut context = Vec::new();
        let mut cin = last + 3;
        let n = config.context_dilations.len();
        for (j, &d) in config.context_dilations.iter().enumerate() {
            let is_last = j + 1 == n;
            let cout = if is_last { 3 } else { config.context_width };
            let mut spec = ConvSpec::new(cin, cout, k, Conv2dOpts::same(k, d));
            if is_last {
                spec = spec.gain(RESIDUAL_HEAD_GAIN);
            }
            context.push(Conv2d::build(
                params,
                rng,
                &format!("{prefix}.context.conv{j}"),
                spec,
            )?);
            cin = cout;
        }
        let compress = match config.temporal_mode {
            TemporalMode::TrFeat => Some(Conv2d::build(
                params,
                rng,
                &format!("{prefix}.compress"),
                ConvSpec::new(last, config.temporal_width, 1, Conv2dOpts::default()),
            )?),
            _ => None,
        };
        Ok(Decoder {
            estimator,
            head,
            context,
            compress,
        })
    }

    /// The decoder instance used at `level` (0 = coarsest).
    pub fn decoder(&self, level: usize) -> &Decoder {
        if self.config.share_decoder {
            &self.decoders[0]
        } else {
            &self.decoders[level]
        }
    }

    pub fn decoders(&self) -> &[Decoder] {
        &self.decoders
    }

    fn slope(&self) -> f64 {
        self.config.leaky_slope
    }

    pub fn encode(&self, b: &Binder, image: &Tensor) -> Result<PyramidFeatures> {
        let (_, c, h, w) = image.dims4("encode")?;
        if c != ModelConfig::IMAGE_CHANNELS {
            return Err(Error::dim("encode", "channels", ModelConfig::IMAGE_CHANNELS, c));
        }
        self.config.check_image_size(h, w)?;
        // intensities in [0, 1] are mapped to [-1, 1]
        let mut x = image.scale(2.0).sub(&Tensor::full(image.shape(), 1.0))?;
        let mut levels = Vec::with_capacity(self.encoder.len());
        for (a, bconv) in &self.encoder {
            x = a.forward(b, &x)?.leaky_relu(self.slope());
            x = bconv.forward(b, &x)?.leaky_relu(self.slope());
            levels.push(x.clone());
        }
        levels.reverse();
        Ok(PyramidFeatures { levels })
    }

    /// One STaR cell evaluation at `level` (0 = coarsest).
    #[allow(clippy::too_many_arguments)]
    pub fn star_cell(
        &self,
        b: &Binder,
        level: usize,
        feat1: &Tensor,
        feat2: &Tensor,
        up_flow: &FlowField,
        up_occ: &Tensor,
        temporal_in: Option<&Tensor>,
    ) -> Result<CellOutput> {
        let cfg = &self.config;
        let slope = self.slope();
        let dec = self.decoder(level);
        let (bsz, _, h, w) = feat1.dims4("star_cell")?;

        let expected_t = cfg.temporal_in_channels();
        match (temporal_in, expected_t) {
            (None, 0) => {}
            (Some(t), n) if n > 0 => {
                if t.shape() != [bsz, n, h, w] {
                    return Err(Error::Contract(format!(
                        "temporal state at level {level} has shape {:?}, expected {:?}",
                        t.shape(),
                        [bsz, n, h, w]
                    )));
                }
            }
            (t, n) => {
                return Err(Error::Contract(format!(
                    "temporal input {} but the configuration expects {n} channels",
                    if t.is_some() { "given" } else { "missing" }
                )))
            }
        }

        let warped = warp(feat2, up_flow)?;
        let cost = correlation(feat1, &warped, cfg.max_disp)?.leaky_relu(slope);
        let adapted = self.adapters[level].forward(b, feat1)?.leaky_relu(slope);
        let mut parts = vec![&cost, &adapted, up_flow.tensor(), up_occ];
        if let Some(t) = temporal_in {
            parts.push(t);
        }
        let mut x = Tensor::concat(&parts, 1)?;
        for conv in &dec.estimator {
            x = conv.forward(b, &x)?.leaky_relu(slope);
        }
        let penultimate = x;

        let head = dec.head.forward(b, &penultimate)?;
        let flow = up_flow.tensor().add(&head.narrow(1, 0, 2)?)?;
        let occ_logit = if cfg.use_occlusion {
            Some(head.narrow(1, 2, 1)?)
        } else {
            None
        };
        let occ_in = match &occ_logit {
            Some(l) => l.sigmoid(),
            None => Tensor::zeros(&[bsz, 1, h, w]),
        };

        let mut y = Tensor::concat(&[&penultimate, &flow, &occ_in], 1)?;
        let n_ctx = dec.context.len();
        for (j, conv) in dec.context.iter().enumerate() {
            y = conv.forward(b, &y)?;
            if j + 1 < n_ctx {
                y = y.leaky_relu(slope);
            }
        }
        let flow = FlowField::new(flow.add(&y.narrow(1, 0, 2)?)?)?;
        let (occ, occ_slot) = match occ_logit {
            Some(l) => {
                let p = l.add(&y.narrow(1, 2, 1)?)?.sigmoid();
                (Some(OcclusionMap(p.clone())), p)
            }
            None => (None, Tensor::zeros(&[bsz, 1, h, w])),
        };
        let features = match &dec.compress {
            Some(c) => Some(c.forward(b, &penultimate)?),
            None => None,
        };
        Ok(CellOutput {
            flow,
            occ,
            occ_slot,
            features,
        })
    }

    /// Coarse-to-fine estimation for one image pair.
    pub fn forward_pair(
        &self,
        b: &Binder,
        p1: &PyramidFeatures,
        p2: &PyramidFeatures,
        state: &StarCellState,
    ) -> Result<PairOutput> {
        let cfg = &self.config;
        if p1.levels.len() != cfg.levels || p2.levels.len() != cfg.levels {
            return Err(Error::Contract("pyramid depth does not match the configuration".into()));
        }
        if state.valid && state.features.len() != cfg.levels {
            return Err(Error::Contract(format!(
                "temporal state has {} levels, expected {}",
                state.features.len(),
                cfg.levels
            )));
        }
        let mut levels: Vec<LevelOutput> = Vec::with_capacity(cfg.levels);
        let mut carried = Vec::new();
        let mut up: Option<(FlowField, Tensor)> = None;
        for l in 0..cfg.levels {
            let (f1, f2) = (&p1.levels[l], &p2.levels[l]);
            let (bsz, _, h, w) = f1.dims4("forward_pair")?;
            let (up_flow, up_occ) = match up.take() {
                Some((flow, occ)) => (flow.upsample()?, occ.upsample2x()?),
                None => (FlowField::zeros(bsz, h, w), Tensor::zeros(&[bsz, 1, h, w])),
            };
            let zeros;
            let temporal = match cfg.temporal_in_channels() {
                0 => None,
                _ if state.valid => Some(&state.features[l]),
                n => {
                    zeros = Tensor::zeros(&[bsz, n, h, w]);
                    Some(&zeros)
                }
            };
            let cell = self.star_cell(b, l, f1, f2, &up_flow, &up_occ, temporal)?;
            if let Some(f) = cell.features {
                carried.push(f);
            }
            up = Some((cell.flow.clone(), cell.occ_slot));
            levels.push(LevelOutput {
                flow: cell.flow,
                occ: cell.occ,
            });
        }
        let carry = match cfg.temporal_mode {
            TemporalMode::None => TemporalCarry::None,
            TemporalMode::TrFeat => TemporalCarry::Features(carried),
            TemporalMode::TrFlow => {
                TemporalCarry::Flow(levels.last().expect("levels >= 1").flow.clone())
            }
        };
        Ok(PairOutput { levels, carry })
    }

    /// Convenience wrapper encoding both images first.
    pub fn forward_images(
        &self,
        b: &Binder,
        i1: &Tensor,
        i2: &Tensor,
        state: &StarCellState,
    ) -> Result<PairOutput> {
        if i1.shape() != i2.shape() {
            return Err(Error::dim(
                "forward_pair",
                "image shape",
                format!("{:?}", i1.shape()),
                format!("{:?}", i2.shape()),
            ));
        }
        let p1 = self.encode(b, i1)?;
        let p2 = self.encode(b, i2)?;
        self.forward_pair(b, &p1, &p2, state)
    }

    /// Finest-level flow from frame t to frame t-1, estimated with the time
    /// order reversed and the temporal connection zeroed.
    ///
    /// Unless `backward_flow_grad` is set, the pass is run without recording
    /// and its result is a constant.
    pub fn estimate_backward_flow(
        &self,
        b: &Binder,
        current: &PyramidFeatures,
        previous: &PyramidFeatures,
    ) -> Result<FlowField> {
        let run = || {
            self.forward_pair(b, current, previous, &StarCellState::invalid())
                .map(|out| out.finest().flow.clone())
        };
        if self.config.backward_flow_grad {
            run()
        } else {
            no_grad(run).map(|f| f.detach())
        }
    }

    /// Moves what step t-1 carried into the geometry of frame t.
    pub fn align_state(&self, carry: &TemporalCarry, backward_flow: &FlowField) -> Result<StarCellState> {
        match carry {
            TemporalCarry::None => Ok(StarCellState::invalid()),
            TemporalCarry::Features(levels) => {
                let flows = self.flow_pyramid(backward_flow)?;
                let features = levels
                    .iter()
                    .zip(&flows)
                    .map(|(f, fl)| warp(f, fl))
                    .collect::<Result<_>>()?;
                Ok(StarCellState {
                    features,
                    valid: true,
                })
            }
            TemporalCarry::Flow(prev) => temporal_connect_trflow(&self.config, prev, backward_flow),
        }
    }

    /// A finest-level flow resampled to every level, coarse to fine.
    fn flow_pyramid(&self, finest: &FlowField) -> Result<Vec<FlowField>> {
        flow_pyramid(self.config.levels, finest)
    }

    /// Runs the model over consecutive pairs of `frames`, threading the
    /// temporal state.
    pub fn forward_sequence(&self, b: &Binder, frames: &[Tensor]) -> Result<SequenceOutput> {
        if frames.len() < 2 {
            return Err(Error::Contract(format!(
                "a sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        for f in &frames[1..] {
            if f.shape() != frames[0].shape() {
                return Err(Error::dim(
                    "forward_sequence",
                    "frame shape",
                    format!("{:?}", frames[0].shape()),
                    format!("{:?}", f.shape()),
                ));
            }
        }
        let mut pyramids: Vec<PyramidFeatures> = Vec::with_capacity(frames.len());
        pyramids.push(self.encode(b, &frames[0])?);
        let mut out = SequenceOutput {
            steps: Vec::with_capacity(frames.len() - 1),
            backward_passes: 0,
            temporal_steps: 0,
            touched: Vec::new(),
        };
        let mut state = StarCellState::invalid();
        for t in 0..frames.len() - 1 {
            pyramids.push(self.encode(b, &frames[t + 1])?);
            if t >= 1 && self.config.temporal_mode != TemporalMode::None {
                let bflow = self.estimate_backward_flow(b, &pyramids[t], &pyramids[t - 1])?;
                out.backward_passes += 1;
                let carry = &out.steps[t - 1].carry;
                state = self.align_state(carry, &bflow)?;
            }
            if state.valid {
                out.temporal_steps += 1;
            }
            let pair = self.forward_pair(b, &pyramids[t], &pyramids[t + 1], &state)?;
            out.steps.push(pair);
            out.touched.push(b.take_touched());
        }
        Ok(out)
    }
}

fn flow_pyramid(levels: usize, finest: &FlowField) -> Result<Vec<FlowField>> {
    let mut out = vec![finest.clone()];
    for _ in 1..levels {
        let next = out.last().expect("non-empty").downsample()?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// TRFlow temporal input: the previous finest flow warped into the current
/// geometry by the backward flow, then resampled to every level with values
/// scaled by the level ratio.
pub fn temporal_connect_trflow(
    config: &ModelConfig,
    prev_flow: &FlowField,
    backward_flow: &FlowField,
) -> Result<StarCellState> {
    if config.temporal_mode != TemporalMode::TrFlow {
        return Err(Error::Contract(format!(
            "TRFlow temporal connection requested for temporal mode {}",
            config.temporal_mode.label()
        )));
    }
    let warped = FlowField::new(warp(prev_flow.tensor(), backward_flow)?)?;
    let features = flow_pyramid(config.levels, &warped)?
        .into_iter()
        .map(FlowField::into_tensor)
        .collect();
    Ok(StarCellState {
        features,
        valid: true,
    })
}
