//! Shared-latent encoder/decoder pair for the UNIT-style translator.
//!
//! Both encoders end in the same residual block and both decoders start
//! with the same residual block, so the two domains meet in one latent
//! space. The high-resolution encoder has three halving stages and the
//! high-resolution decoder three doubling stages, which puts the latent
//! grid at the low-resolution patch size.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

use super::generator::{DownGeneratorSpec, SrGeneratorSpec};
use super::layers::{Conv, DownStage, ResBlock, UpStage, LEAK};
use super::params::{Bindings, Initializer, ParamSet};

/// Prefixes of the parameter groups.
pub const ENC_LR: &str = "enc_lr";
pub const ENC_HR: &str = "enc_hr";
pub const DEC_LR: &str = "dec_lr";
pub const DEC_HR: &str = "dec_hr";
pub const SHARED: &str = "shared";

#[derive(Debug, Clone)]
pub struct UnitPair {
    width: usize,
    enc_lr_head: Conv,
    enc_lr_blocks: Vec<ResBlock>,
    enc_hr_head: Conv,
    enc_hr_downs: Vec<DownStage>,
    enc_hr_blocks: Vec<ResBlock>,
    shared_enc: ResBlock,
    shared_dec: ResBlock,
    dec_lr_blocks: Vec<ResBlock>,
    dec_lr_tail: Conv,
    dec_hr_blocks: Vec<ResBlock>,
    dec_hr_ups: Vec<UpStage>,
    dec_hr_tail: Conv,
}

/// Parameters of a [`UnitPair`], split the way a model bundle stores them.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams {
    /// Low-to-high path: LR encoder and HR decoder.
    pub lr_to_hr: ParamSet,
    /// High-to-low path: HR encoder and LR decoder.
    pub hr_to_lr: ParamSet,
    pub shared: ParamSet,
}

impl UnitPair {
    pub fn new(sr: &SrGeneratorSpec, down: &DownGeneratorSpec) -> Result<Self> {
        sr.validate()?;
        down.validate()?;
        if sr.base_width != down.base_width {
            return Err(Error::Construction(format!(
                "latent channel mismatch: LR encoder emits {} channels, HR encoder {}",
                sr.base_width, down.base_width
            )));
        }
        if sr.upscale_stages != down.downscale_stages {
            return Err(Error::Construction(format!(
                "latent size mismatch: {} halving stages vs {} doubling stages",
                down.downscale_stages, sr.upscale_stages
            )));
        }
        let w = sr.base_width;
        let private = (sr.n_res_blocks / 2).max(1);
        let blocks = |prefix: &str| -> Vec<ResBlock> {
            (0..private).map(|i| ResBlock::new(&format!("{prefix}.res{i}"), w)).collect()
        };
        Ok(Self {
            width: w,
            enc_lr_head: Conv::same(format!("{ENC_LR}.head"), 1, w),
            enc_lr_blocks: blocks(ENC_LR),
            enc_hr_head: Conv::same(format!("{ENC_HR}.head"), 1, w),
            enc_hr_downs: (0..down.downscale_stages)
                .map(|i| DownStage::new(&format!("{ENC_HR}.down{i}"), w))
                .collect(),
            enc_hr_blocks: blocks(ENC_HR),
            shared_enc: ResBlock::new(&format!("{SHARED}.enc"), w),
            shared_dec: ResBlock::new(&format!("{SHARED}.dec"), w),
            dec_lr_blocks: blocks(DEC_LR),
            dec_lr_tail: Conv::same(format!("{DEC_LR}.tail"), w, 1),
            dec_hr_blocks: blocks(DEC_HR),
            dec_hr_ups: (0..sr.upscale_stages)
                .map(|i| UpStage::new(&format!("{DEC_HR}.up{i}"), w))
                .collect(),
            dec_hr_tail: Conv::same(format!("{DEC_HR}.tail"), w, 1),
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.width
    }

    pub fn init_params(&self, seed: u64) -> Result<UnitParams> {
        let mut init = Initializer::new(seed);
        let gain = std::f64::consts::SQRT_2;
        let mut enc_lr = ParamSet::new();
        self.enc_lr_head.init(&mut enc_lr, &mut init, gain)?;
        for b in &self.enc_lr_blocks {
            b.init(&mut enc_lr, &mut init)?;
        }
        let mut enc_hr = ParamSet::new();
        self.enc_hr_head.init(&mut enc_hr, &mut init, gain)?;
        for d in &self.enc_hr_downs {
            d.init(&mut enc_hr, &mut init)?;
        }
        for b in &self.enc_hr_blocks {
            b.init(&mut enc_hr, &mut init)?;
        }
        let mut shared = ParamSet::new();
        self.shared_enc.init(&mut shared, &mut init)?;
        self.shared_dec.init(&mut shared, &mut init)?;
        let mut dec_lr = ParamSet::new();
        for b in &self.dec_lr_blocks {
            b.init(&mut dec_lr, &mut init)?;
        }
        self.dec_lr_tail.init(&mut dec_lr, &mut init, 1.0)?;
        let mut dec_hr = ParamSet::new();
        for b in &self.dec_hr_blocks {
            b.init(&mut dec_hr, &mut init)?;
        }
        for u in &self.dec_hr_ups {
            u.init(&mut dec_hr, &mut init)?;
        }
        self.dec_hr_tail.init(&mut dec_hr, &mut init, 1.0)?;

        let mut lr_to_hr = enc_lr;
        lr_to_hr.extend(dec_hr)?;
        let mut hr_to_lr = enc_hr;
        hr_to_lr.extend(dec_lr)?;
        Ok(UnitParams {
            lr_to_hr,
            hr_to_lr,
            shared,
        })
    }

    /// Latent mean for a low-resolution image.
    pub fn encode_lr(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.enc_lr_head.forward(tape, b, x)?;
        let mut h = tape.leaky_relu(h, LEAK);
        for block in &self.enc_lr_blocks {
            h = block.forward(tape, b, h)?;
        }
        self.shared_enc.forward(tape, b, h)
    }

    /// Latent mean for a high-resolution image.
    pub fn encode_hr(&self, tape: &mut Tape, b: &Bindings, y: Var) -> Result<Var> {
        let h = self.enc_hr_head.forward(tape, b, y)?;
        let mut h = tape.leaky_relu(h, LEAK);
        for d in &self.enc_hr_downs {
            h = d.forward(tape, b, h)?;
        }
        for block in &self.enc_hr_blocks {
            h = block.forward(tape, b, h)?;
        }
        self.shared_enc.forward(tape, b, h)
    }

    pub fn decode_lr(&self, tape: &mut Tape, b: &Bindings, z: Var) -> Result<Var> {
        let mut h = self.shared_dec.forward(tape, b, z)?;
        for block in &self.dec_lr_blocks {
            h = block.forward(tape, b, h)?;
        }
        let h = self.dec_lr_tail.forward(tape, b, h)?;
        Ok(tape.tanh(h))
    }

    pub fn decode_hr(&self, tape: &mut Tape, b: &Bindings, z: Var) -> Result<Var> {
        let mut h = self.shared_dec.forward(tape, b, z)?;
        for block in &self.dec_hr_blocks {
            h = block.forward(tape, b, h)?;
        }
        for up in &self.dec_hr_ups {
            h = up.forward(tape, b, h)?;
        }
        let h = self.dec_hr_tail.forward(tape, b, h)?;
        Ok(tape.tanh(h))
    }
}
