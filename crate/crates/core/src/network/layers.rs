use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::param::{Binder, ParamId, ParamStore};
use crate::tensor::{Conv2dOpts, Tensor};

/// A convolution whose weight and bias live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub opts: Conv2dOpts,
}

pub(crate) struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub opts: Conv2dOpts,
    /// Multiplies the fan-in initialisation scale.
    pub gain: f64,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize, opts: Conv2dOpts) -> Self {
        ConvSpec {
            cin,
            cout,
            k,
            opts,
            gain: 1.0,
        }
    }

    pub fn gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }
}

impl Conv2d {
    pub(crate) fn build(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Self> {
        let fan_in = (spec.cin * spec.k * spec.k) as f64;
        let std = spec.gain * (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = spec.cout * spec.cin * spec.k * spec.k;
        let w: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            &[spec.cout, spec.cin, spec.k, spec.k],
            w,
        )?;
        let bias = store.add(format!("{name}.bias"), &[spec.cout], vec![0.0; spec.cout])?;
        Ok(Conv2d {
            weight,
            bias,
            opts: spec.opts,
        })
    }

    pub fn forward(&self, b: &Binder, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&b.get(self.weight), Some(&b.get(self.bias)), self.opts)
    }
}
