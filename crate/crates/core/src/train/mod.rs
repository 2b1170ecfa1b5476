//! Adversarial training with the multi-modality objective.

pub mod checkpoint;
mod config;
pub mod log;
mod optim;
mod pool;
mod state;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{TrainConfig, UnitWeights};
pub use log::write_loss_csv;
pub use optim::Adam;
pub use pool::ImagePool;
pub use state::{IterationLog, OrigParts, RngState, TrainState};
pub use trainer::Trainer;

use crate::data::{extract_patches, DatasetManifest};
use crate::error::Result;
use crate::nn::{ModelBundle, Variant};

/// Extracts patches from `manifest` and trains every epoch of `config`,
/// drawing a fresh patch set per epoch when the manifest asks for it.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest) -> Result<(ModelBundle, TrainState)> {
    config.validate()?;
    let data = extract_patches(manifest, config.patch_sizes, 0)?;
    let mut trainer = Trainer::new(config.clone(), data)?;
    train_epochs(&mut trainer, manifest, |_| Ok(()))?;
    Ok(trainer.into_parts())
}

/// Runs the remaining epochs of `trainer`. `on_epoch` sees the trainer
/// after each finished epoch, before any resampling.
pub fn train_epochs(
    trainer: &mut Trainer,
    manifest: &DatasetManifest,
    mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
) -> Result<()> {
    trainer.run(None, |t| {
        on_epoch(t)?;
        if manifest.resample_each_epoch && !t.state.is_finished() {
            let epoch = t.state.epoch as u64;
            t.set_data(extract_patches(manifest, t.config().patch_sizes, epoch)?)?;
        }
        Ok(())
    })
}

pub fn train_sr_cyclegan(config: &TrainConfig, manifest: &DatasetManifest) -> Result<(ModelBundle, TrainState)> {
    train(
        &TrainConfig {
            variant: Variant::SrCycleGan,
            ..config.clone()
        },
        manifest,
    )
}

pub fn train_sr_unit(config: &TrainConfig, manifest: &DatasetManifest) -> Result<(ModelBundle, TrainState)> {
    train(
        &TrainConfig {
            variant: Variant::SrUnit,
            ..config.clone()
        },
        manifest,
    )
}
