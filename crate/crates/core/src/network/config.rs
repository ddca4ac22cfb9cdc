use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the temporal connection carries from one image pair to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalMode {
    /// Two-frame estimation; no temporal connection.
    None,
    /// The previous flow estimate, warped into the current geometry.
    #[serde(rename = "trflow")]
    TrFlow,
    /// 1x1-compressed penultimate estimator features, warped into the
    /// current geometry.
    #[serde(rename = "trfeat")]
    TrFeat,
}

impl TemporalMode {
    pub fn label(self) -> &'static str {
        match self {
            TemporalMode::None => "none",
            TemporalMode::TrFlow => "trflow",
            TemporalMode::TrFeat => "trfeat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Pyramid levels decoded, finest at half the input resolution.
    pub levels: usize,
    /// Encoder channel widths, finest level first.
    pub encoder_widths: Vec<usize>,
    /// Width of the per-level 1x1 adapters that bring reference features to a
    /// common channel count before they enter the estimator.
    pub feature_width: usize,
    pub estimator_widths: Vec<usize>,
    pub context_width: usize,
    pub context_dilations: Vec<usize>,
    pub kernel: usize,
    pub max_disp: usize,
    pub temporal_width: usize,
    pub use_occlusion: bool,
    pub temporal_mode: TemporalMode,
    pub share_decoder: bool,
    /// Training sequence length N.
    pub seq_len: usize,
    pub leaky_slope: f64,
    /// Differentiate through the reversed-time pass that estimates the
    /// backward flow.
    pub backward_flow_grad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            encoder_widths: vec![16, 32, 32, 32],
            feature_width: 32,
            estimator_widths: vec![32, 32, 16],
            context_width: 16,
            context_dilations: vec![1, 2, 4, 1],
            kernel: 3,
            max_disp: 2,
            temporal_width: 16,
            use_occlusion: true,
            temporal_mode: TemporalMode::TrFeat,
            share_decoder: true,
            seq_len: 4,
            leaky_slope: 0.1,
            backward_flow_grad: false,
        }
    }
}

impl ModelConfig {
    pub const IMAGE_CHANNELS: usize = 3;

    /// A very small configuration for fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            levels: 3,
            encoder_widths: vec![8, 12, 12],
            feature_width: 8,
            estimator_widths: vec![12, 8],
            context_width: 8,
            context_dilations: vec![1, 2, 1],
            kernel: 3,
            max_disp: 1,
            temporal_width: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.encoder_widths.len() != self.levels {
            return Err(Error::Config(format!(
                "encoder_widths has {} entries for {} levels",
                self.encoder_widths.len(),
                self.levels
            )));
        }
        if self.estimator_widths.is_empty() {
            return Err(Error::Config("estimator_widths must not be empty".into()));
        }
        if self.context_dilations.is_empty() {
            return Err(Error::Config("context_dilations must not be empty".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.max_disp == 0 {
            return Err(Error::Config("max_disp must be >= 1".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in (0, 1)".into()));
        }
        let widths = [
            self.feature_width,
            self.context_width,
            self.temporal_width,
        ];
        if self.encoder_widths.iter().chain(&self.estimator_widths).chain(&widths).any(|&w| w == 0)
            || self.context_dilations.contains(&0)
        {
            return Err(Error::Config("widths and dilations must be positive".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn check_image_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::Config(format!(
                "image size {height}x{width} is not a positive multiple of 2^{} = {m}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Spatial extent of level `l` (0 = coarsest) for an input extent.
    pub fn level_extent(&self, input: usize, level: usize) -> usize {
        input >> (self.levels - level)
    }

    pub fn cost_volume_channels(&self) -> usize {
        let side = 2 * self.max_disp + 1;
        side * side
    }

    /// Channels the temporal connection feeds into the estimator.
    pub fn temporal_in_channels(&self) -> usize {
        match self.temporal_mode {
            TemporalMode::None => 0,
            TemporalMode::TrFlow => 2,
            TemporalMode::TrFeat => self.temporal_width,
        }
    }

    /// Estimator input: cost volume, adapted reference features, upsampled
    /// flow, upsampled occlusion slot, temporal features (last).
    pub fn estimator_in_channels(&self) -> usize {
        self.cost_volume_channels() + self.feature_width + 3 + self.temporal_in_channels()
    }

    pub fn head_out_channels(&self) -> usize {
        if self.use_occlusion {
            3
        } else {
            2
        }
    }

    pub fn penultimate_width(&self) -> usize {
        *self.estimator_widths.last().expect("validated")
    }

    pub fn decoder_instances(&self) -> usize {
        if self.share_decoder {
            1
        } else {
            self.levels
        }
    }

    /// Default multi-scale loss weights, coarse to fine.
    ///
    /// The finest four are `[0.32, 0.08, 0.02, 0.01]`; coarser levels beyond
    /// those keep growing by 4x.
    pub fn default_alphas(&self) -> Vec<f64> {
        const FINE_TO_COARSE: [f64; 4] = [0.01, 0.02, 0.08, 0.32];
        let mut v: Vec<f64> = (0..self.levels)
            .map(|i| {
                if i < FINE_TO_COARSE.len() {
                    FINE_TO_COARSE[i]
                } else {
                    FINE_TO_COARSE[3] * 4f64.powi((i - 3) as i32)
                }
            })
            .collect();
        v.reverse();
        v
    }
}
