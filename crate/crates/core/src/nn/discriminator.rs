use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

use super::layers::{Conv, LEAK};
use super::params::{Bindings, Initializer, ParamSet};
use super::Network;

/// Patch discriminator: `n_layers` stride-2 convolutions and a 3x3 scoring
/// convolution. The output is a grid of unbounded realness scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub n_layers: usize,
    pub base_width: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            n_layers: 4,
            base_width: 64,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 || self.n_layers == 0 || self.base_width == 0 {
            return Err(Error::param(
                "discriminator needs one input channel, n_layers >= 1 and base_width >= 1",
            ));
        }
        Ok(())
    }

    /// Smallest input side the discriminator accepts.
    pub fn min_input(&self) -> usize {
        1 << self.n_layers
    }

    /// Score-grid side for a square input of side `size`.
    pub fn score_size(&self, size: usize) -> usize {
        size >> self.n_layers
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    layers: Vec<Conv>,
    score: Conv,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.n_layers);
        let mut ch = spec.in_channels;
        for i in 0..spec.n_layers {
            let out = spec.base_width << i.min(3);
            layers.push(Conv::halving(format!("{prefix}.layer{i}"), ch, out));
            ch = out;
        }
        Ok(Self {
            spec,
            layers,
            score: Conv::same(format!("{prefix}.score"), ch, 1),
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }
}

impl Network for Discriminator {
    fn init_params(&self, init: &mut Initializer, params: &mut ParamSet) -> Result<()> {
        for l in &self.layers {
            l.init(params, init, std::f64::consts::SQRT_2)?;
        }
        self.score.init(params, init, 1.0)
    }

    fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        let min = self.spec.min_input();
        if h < min || w < min || h % min != 0 || w % min != 0 {
            return Err(Error::shape(format!(
                "discriminator with {} layers needs sides that are multiples of {min}, got {h}x{w}",
                self.spec.n_layers
            )));
        }
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, b, h)?;
            if i > 0 {
                h = tape.instance_norm(h)?;
            }
            h = tape.leaky_relu(h, LEAK);
        }
        self.score.forward(tape, b, h)
    }
}
