use serde::Serialize;

use super::config::{ModelConfig, TemporalMode};

fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

/// Closed-form parameter counts, without building a model.
///
/// Shared parameters are counted once; `decoder` covers every decoder
/// instance (one when shared across scales, one per level otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub adapters: usize,
    pub estimator: usize,
    pub head: usize,
    pub context: usize,
    pub compress: usize,
    /// Sum of the four decoder parts above.
    pub decoder: usize,
    pub decoder_instances: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn per_decoder(&self) -> usize {
        self.decoder / self.decoder_instances
    }
}

pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let k = config.kernel;

    let mut encoder = 0;
    let mut cin = ModelConfig::IMAGE_CHANNELS;
    for &w in &config.encoder_widths {
        encoder += conv(k, cin, w) + conv(k, w, w);
        cin = w;
    }
    let adapters: usize = config
        .encoder_widths
        .iter()
        .map(|&w| conv(1, w, config.feature_width))
        .sum();

    let mut estimator = 0;
    let mut cin = config.estimator_in_channels();
    for &w in &config.estimator_widths {
        estimator += conv(k, cin, w);
        cin = w;
    }
    let last = config.penultimate_width();
    let head = conv(k, last, config.head_out_channels());
    let mut context = 0;
    let mut cin = last + 3;
    let n = config.context_dilations.len();
    for j in 0..n {
        let cout = if j + 1 == n { 3 } else { config.context_width };
        context += conv(k, cin, cout);
        cin = cout;
    }
    let compress = match config.temporal_mode {
        TemporalMode::TrFeat => conv(1, last, config.temporal_width),
        _ => 0,
    };

    let inst = config.decoder_instances();
    let (estimator, head, context, compress) =
        (estimator * inst, head * inst, context * inst, compress * inst);
    let decoder = estimator + head + context + compress;
    ParamCount {
        encoder,
        adapters,
        estimator,
        head,
        context,
        compress,
        decoder,
        decoder_instances: inst,
        total: encoder + adapters + decoder,
    }
}
