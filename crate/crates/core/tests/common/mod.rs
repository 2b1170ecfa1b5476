#![allow(dead_code)]

use std::sync::OnceLock;

use mmsr_core::data::{extract_patches, make_synthetic_dataset, PatchSet, PatchSizes, SyntheticConfig};
use mmsr_core::nn::ModelSpecs;
use mmsr_core::train::TrainConfig;

/// Synthetic patch set with `per_case` patches from each of `cases` volumes
/// per domain.
pub fn synthetic_patches(cases: usize, per_case: usize, seed: u64) -> PatchSet {
    let cfg = SyntheticConfig {
        seed,
        cases_per_domain: cases,
        micro_dims: [256, 256, 4],
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_synthetic_dataset(&cfg)
        .unwrap()
        .write(dir.path(), per_case, seed)
        .unwrap();
    extract_patches(&manifest, PatchSizes::default(), 0).unwrap()
}

/// 64 patches per domain, shared by every test in a binary.
pub fn patches_64() -> &'static PatchSet {
    static SET: OnceLock<PatchSet> = OnceLock::new();
    SET.get_or_init(|| synthetic_patches(2, 32, 11))
}

/// 8 patches per domain.
pub fn patches_8() -> &'static PatchSet {
    static SET: OnceLock<PatchSet> = OnceLock::new();
    SET.get_or_init(|| synthetic_patches(2, 4, 3))
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelSpecs::compact(8, 2),
        seed,
        ..Default::default()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
