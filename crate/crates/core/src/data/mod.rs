//! Volume loading, lung segmentation, normalization, patch sampling and the
//! synthetic dataset generator.

pub mod cache;
pub mod io;
pub mod manifest;
pub mod normalize;
pub mod sample;
pub mod segment;
pub mod synthetic;
pub mod volume;

pub use cache::{extract_patches, PatchSet, PatchSizes};
pub use io::{load_volume, save_volume};
pub use manifest::{DatasetManifest, VolumeRef};
pub use normalize::{denormalize, fit_intensity_map, normalize, IntensityMap};
pub use sample::{sample_patches, PatchSample};
pub use segment::{segment_lung, SegmentParams};
pub use synthetic::{make_synthetic_dataset, SyntheticConfig, SyntheticDataset};
pub use volume::{CtVolume, LungMask, Modality, Spacing, SpacingUnit};
