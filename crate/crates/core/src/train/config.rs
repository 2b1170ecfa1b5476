use serde::{Deserialize, Serialize};

use crate::data::PatchSizes;
use crate::error::{Error, Result};
use crate::loss::{LossWeights, SsimParams};
use crate::nn::{ModelSpecs, Variant};

/// Extra weights of the shared-latent objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnitWeights {
    /// Within-domain reconstruction (L1).
    pub recon: f64,
    /// Latent mean penalty on first-pass encodings.
    pub kl: f64,
    /// Latent mean penalty on cycle encodings.
    pub cycle_kl: f64,
    /// Standard deviation of the noise added to latent means.
    pub latent_noise: f64,
}

impl Default for UnitWeights {
    fn default() -> Self {
        Self {
            recon: 10.0,
            kl: 0.01,
            cycle_kl: 0.01,
            latent_noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum_coeffs: (f64, f64),
    pub weights: LossWeights,
    pub ssim: SsimParams,
    pub unit: UnitWeights,
    pub pool_size: usize,
    pub seed: u64,
    pub model: ModelSpecs,
    pub patch_sizes: PatchSizes,
    /// Checkpoint every this many epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SrCycleGan,
            epochs: 200,
            batch_size: 1,
            lr: 2e-4,
            momentum_coeffs: (0.5, 0.999),
            weights: LossWeights::default(),
            ssim: SsimParams::default(),
            unit: UnitWeights::default(),
            pool_size: 50,
            seed: 0,
            model: ModelSpecs::default(),
            patch_sizes: PatchSizes::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr must be positive"));
        }
        let (b1, b2) = self.momentum_coeffs;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::param("momentum coefficients must lie in [0, 1)"));
        }
        let u = &self.unit;
        if [u.recon, u.kl, u.cycle_kl, u.latent_noise].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::param("unit weights must be finite and non-negative"));
        }
        let ps = self.patch_sizes;
        if ps.micro != ps.clinical * crate::loss::SCALE_FACTOR {
            return Err(Error::param(format!(
                "micro patch size {} must be 8x the clinical size {}",
                ps.micro, ps.clinical
            )));
        }
        self.weights.validate()?;
        self.ssim.validate()?;
        self.model.validate()
    }

    /// Learning rate for `epoch`: constant over the first half, then a
    /// linear ramp towards zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let half = self.epochs / 2;
        if epoch < half {
            self.lr
        } else {
            let left = self.epochs.saturating_sub(epoch) as f64;
            self.lr * left / (self.epochs - half + 1) as f64
        }
    }
}
