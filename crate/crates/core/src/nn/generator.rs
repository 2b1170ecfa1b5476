use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::SCALE_FACTOR;

use super::layers::{Conv, DownStage, ResBlock, UpStage, LEAK};
use super::params::{Bindings, Initializer, ParamSet};
use super::Network;

/// ResNet-style 8x super-resolution generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrGeneratorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_res_blocks: usize,
    /// Each stage doubles the resolution.
    pub upscale_stages: usize,
}

impl Default for SrGeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 64,
            n_res_blocks: 6,
            upscale_stages: 3,
        }
    }
}

impl SrGeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::param("generators take single-channel input"));
        }
        if self.base_width == 0 || self.n_res_blocks == 0 {
            return Err(Error::param("base_width and n_res_blocks must be positive"));
        }
        if 1usize.checked_shl(self.upscale_stages as u32) != Some(SCALE_FACTOR) {
            return Err(Error::param(format!(
                "{} upscale stages do not give a {SCALE_FACTOR}x scale",
                self.upscale_stages
            )));
        }
        Ok(())
    }
}

/// Generator mapping a high-resolution image to 1/8 of its size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownGeneratorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    /// Each stage halves the resolution.
    pub downscale_stages: usize,
    #[serde(default = "default_down_res_blocks")]
    pub n_res_blocks: usize,
}

fn default_down_res_blocks() -> usize {
    3
}

impl Default for DownGeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 64,
            downscale_stages: 3,
            n_res_blocks: default_down_res_blocks(),
        }
    }
}

impl DownGeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::param("generators take single-channel input"));
        }
        if self.base_width == 0 {
            return Err(Error::param("base_width must be positive"));
        }
        if 1usize.checked_shl(self.downscale_stages as u32) != Some(SCALE_FACTOR) {
            return Err(Error::param(format!(
                "{} downscale stages do not give a 1/{SCALE_FACTOR} scale",
                self.downscale_stages
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SrGenerator {
    spec: SrGeneratorSpec,
    head: Conv,
    blocks: Vec<ResBlock>,
    mid: Conv,
    ups: Vec<UpStage>,
    tail: Conv,
}

impl SrGenerator {
    pub fn new(spec: SrGeneratorSpec, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        Ok(Self {
            spec,
            head: Conv::same(format!("{prefix}.head"), spec.in_channels, w),
            blocks: (0..spec.n_res_blocks)
                .map(|i| ResBlock::new(&format!("{prefix}.res{i}"), w))
                .collect(),
            mid: Conv::same(format!("{prefix}.mid"), w, w),
            ups: (0..spec.upscale_stages)
                .map(|i| UpStage::new(&format!("{prefix}.up{i}"), w))
                .collect(),
            tail: Conv::same(format!("{prefix}.tail"), w, 1),
        })
    }

    pub fn spec(&self) -> &SrGeneratorSpec {
        &self.spec
    }
}

impl Network for SrGenerator {
    fn init_params(&self, init: &mut Initializer, params: &mut ParamSet) -> Result<()> {
        self.head.init(params, init, std::f64::consts::SQRT_2)?;
        for b in &self.blocks {
            b.init(params, init)?;
        }
        self.mid.init(params, init, 1.0)?;
        for u in &self.ups {
            u.init(params, init)?;
        }
        self.tail.init(params, init, 1.0)
    }

    fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let head = self.head.forward(tape, b, x)?;
        let head = tape.leaky_relu(head, LEAK);
        let mut h = head;
        for block in &self.blocks {
            h = block.forward(tape, b, h)?;
        }
        let h = self.mid.forward(tape, b, h)?;
        let h = tape.instance_norm(h)?;
        let mut h = tape.add(head, h)?;
        for up in &self.ups {
            h = up.forward(tape, b, h)?;
        }
        let h = self.tail.forward(tape, b, h)?;
        Ok(tape.tanh(h))
    }
}

#[derive(Debug, Clone)]
pub struct DownGenerator {
    spec: DownGeneratorSpec,
    head: Conv,
    downs: Vec<DownStage>,
    blocks: Vec<ResBlock>,
    tail: Conv,
}

impl DownGenerator {
    pub fn new(spec: DownGeneratorSpec, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        Ok(Self {
            spec,
            head: Conv::same(format!("{prefix}.head"), spec.in_channels, w),
            downs: (0..spec.downscale_stages)
                .map(|i| DownStage::new(&format!("{prefix}.down{i}"), w))
                .collect(),
            blocks: (0..spec.n_res_blocks)
                .map(|i| ResBlock::new(&format!("{prefix}.res{i}"), w))
                .collect(),
            tail: Conv::same(format!("{prefix}.tail"), w, 1),
        })
    }

    pub fn spec(&self) -> &DownGeneratorSpec {
        &self.spec
    }
}

impl Network for DownGenerator {
    fn init_params(&self, init: &mut Initializer, params: &mut ParamSet) -> Result<()> {
        self.head.init(params, init, std::f64::consts::SQRT_2)?;
        for d in &self.downs {
            d.init(params, init)?;
        }
        for b in &self.blocks {
            b.init(params, init)?;
        }
        self.tail.init(params, init, 1.0)
    }

    fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        if h % SCALE_FACTOR != 0 || w % SCALE_FACTOR != 0 {
            return Err(Error::shape(format!(
                "down generator input {h}x{w} is not divisible by {SCALE_FACTOR}"
            )));
        }
        let x = self.head.forward(tape, b, x)?;
        let mut h = tape.leaky_relu(x, LEAK);
        for d in &self.downs {
            h = d.forward(tape, b, h)?;
        }
        for block in &self.blocks {
            h = block.forward(tape, b, h)?;
        }
        let h = self.tail.forward(tape, b, h)?;
        Ok(tape.tanh(h))
    }
}
