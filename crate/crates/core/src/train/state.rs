use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::nn::derive_seed;

use super::config::TrainConfig;
use super::optim::Adam;
use super::pool::ImagePool;

/// Unweighted parts of the base objective. Terms a variant does not use
/// stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OrigParts {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub reconstruction: f64,
    pub latent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
    pub parts: OrigParts,
    pub d_x_loss: f64,
    pub d_y_loss: f64,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything besides the model parameters that training needs to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed iterations; `epoch * iterations_per_epoch + within-epoch index`.
    pub iteration: u64,
    pub epoch: usize,
    pub iterations_per_epoch: u64,
    pub loss_history: Vec<IterationLog>,
    pub rng: ChaCha8Rng,
    pub g_optim: Adam,
    pub d_optim: Adam,
    /// Replay pools of fake low- and high-resolution images.
    pub pool_x: ImagePool,
    pub pool_y: ImagePool,
}

/// Seed stream of the training RNG (pool draws and latent noise).
pub const TRAIN_RNG_STREAM: u64 = 6;

impl TrainState {
    pub fn new(config: TrainConfig, iterations_per_epoch: u64) -> Self {
        let (b1, b2) = config.momentum_coeffs;
        Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TRAIN_RNG_STREAM)),
            g_optim: Adam::new(b1, b2),
            d_optim: Adam::new(b1, b2),
            pool_x: ImagePool::new(config.pool_size),
            pool_y: ImagePool::new(config.pool_size),
            config,
            iteration: 0,
            epoch: 0,
            iterations_per_epoch,
            loss_history: Vec::new(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn within_epoch(&self) -> u64 {
        self.iteration - self.epoch as u64 * self.iterations_per_epoch
    }

    pub fn breakdowns(&self) -> impl Iterator<Item = &LossBreakdown> {
        self.loss_history.iter().map(|l| &l.breakdown)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn rng_state_roundtrip_continues_the_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..17 {
            a.next_u32();
        }
        let mut b = RngState::capture(&a).restore().unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
