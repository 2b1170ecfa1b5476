//! Patch extraction over a whole dataset and the on-disk patch cache.
//!
//! A cache directory holds `clinical.f32` and `micro.f32` (patches
//! concatenated row-major as little-endian f32) and `patches.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::par;
use crate::patch::ImagePatch;

use super::io::{load_volume, write_atomic};
use super::manifest::{DatasetManifest, VolumeRef};
use super::normalize::{normalize, IntensityMap};
use super::sample::{sample_patches, PatchSample};
use super::segment::segment_lung;
use super::volume::Modality;

pub const CACHE_MANIFEST: &str = "patches.json";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSizes {
    pub clinical: usize,
    pub micro: usize,
}

impl Default for PatchSizes {
    fn default() -> Self {
        Self {
            clinical: 32,
            micro: 256,
        }
    }
}

/// Unpaired training patches for both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub sizes: PatchSizes,
    pub clinical: Vec<PatchSample>,
    pub micro: Vec<PatchSample>,
    /// Per-volume normalization, keyed by volume id.
    pub intensity_maps: BTreeMap<String, IntensityMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PatchEntry {
    volume_id: String,
    slice_index: usize,
    origin: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheManifest {
    version: u32,
    sizes: PatchSizes,
    clinical: Vec<PatchEntry>,
    micro: Vec<PatchEntry>,
    intensity_maps: BTreeMap<String, IntensityMap>,
}

struct Extracted {
    id: String,
    map: IntensityMap,
    patches: Vec<PatchSample>,
}

fn extract_one(v: &VolumeRef, modality: Modality, size: usize, count: usize, seed: u64) -> Result<Extracted> {
    let mut vol = load_volume(&v.path, modality)?;
    vol.id = v.id.clone();
    let mask = segment_lung(&vol)?;
    let (norm, map) = normalize(&vol, Some(&mask))?;
    let patches = sample_patches(&norm, &mask, size, count, seed)?;
    Ok(Extracted {
        id: v.id.clone(),
        map,
        patches,
    })
}

/// Segments, normalizes and samples every volume in the manifest.
/// Volume `i` of a domain samples with `derive_seed(seed, i)` (clinical)
/// or `derive_seed(seed, 1 << 32 | i)` (micro); `epoch` is mixed in when
/// drawing a fresh set per epoch.
pub fn extract_patches(manifest: &DatasetManifest, sizes: PatchSizes, epoch: u64) -> Result<PatchSet> {
    manifest.validate()?;
    let seed = if manifest.resample_each_epoch {
        derive_seed(manifest.seed, epoch)
    } else {
        manifest.seed
    };
    let jobs: Vec<(&VolumeRef, Modality, usize, u64)> = manifest
        .clinical_volumes
        .iter()
        .enumerate()
        .map(|(i, v)| (v, Modality::Clinical, sizes.clinical, derive_seed(seed, i as u64)))
        .chain(
            manifest
                .micro_volumes
                .iter()
                .enumerate()
                .map(|(i, v)| (v, Modality::Micro, sizes.micro, derive_seed(seed, 1 << 32 | i as u64))),
        )
        .collect();
    let done = par::try_map(&jobs, |&(v, m, size, s)| extract_one(v, m, size, manifest.patches_per_case, s))?;
    let mut set = PatchSet {
        sizes,
        clinical: Vec::new(),
        micro: Vec::new(),
        intensity_maps: BTreeMap::new(),
    };
    for (e, (_, modality, _, _)) in done.into_iter().zip(&jobs) {
        set.intensity_maps.insert(e.id, e.map);
        match modality {
            Modality::Clinical => set.clinical.extend(e.patches),
            _ => set.micro.extend(e.patches),
        }
    }
    Ok(set)
}

fn entries(ps: &[PatchSample]) -> Vec<PatchEntry> {
    ps.iter()
        .map(|p| PatchEntry {
            volume_id: p.volume_id.clone(),
            slice_index: p.slice_index,
            origin: p.origin,
        })
        .collect()
}

fn blob(ps: &[PatchSample]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in ps {
        for &v in p.patch.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn unblob(
    path: &Path,
    entries: Vec<PatchEntry>,
    size: usize,
    modality: Modality,
) -> Result<Vec<PatchSample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let per = size * size * 4;
    if bytes.len() != per * entries.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes for {} patches, found {}", per * entries.len(), entries.len(), bytes.len()),
        });
    }
    entries
        .into_iter()
        .zip(bytes.chunks_exact(per))
        .map(|(e, chunk)| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Ok(PatchSample {
                patch: ImagePatch::new(size, size, data).map_err(|err| Error::Parse {
                    path: path.to_path_buf(),
                    reason: err.to_string(),
                })?,
                volume_id: e.volume_id,
                slice_index: e.slice_index,
                origin: e.origin,
                modality,
            })
        })
        .collect()
}

impl PatchSet {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("clinical.f32"), &blob(&self.clinical))?;
        write_atomic(&dir.join("micro.f32"), &blob(&self.micro))?;
        let m = CacheManifest {
            version: CACHE_VERSION,
            sizes: self.sizes,
            clinical: entries(&self.clinical),
            micro: entries(&self.micro),
            intensity_maps: self.intensity_maps.clone(),
        };
        write_atomic(&dir.join(CACHE_MANIFEST), serde_json::to_string_pretty(&m)?.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(CACHE_MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: CacheManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        if m.version != CACHE_VERSION {
            return Err(Error::Parse {
                path: mpath,
                reason: format!("unsupported cache version {}", m.version),
            });
        }
        Ok(Self {
            sizes: m.sizes,
            clinical: unblob(&dir.join("clinical.f32"), m.clinical, m.sizes.clinical, Modality::Clinical)?,
            micro: unblob(&dir.join("micro.f32"), m.micro, m.sizes.micro, Modality::Micro)?,
            intensity_maps: m.intensity_maps,
        })
    }

    /// Rounds every value to f32, matching what a write/read cycle yields.
    pub fn quantized(mut self) -> Self {
        for p in self.clinical.iter_mut().chain(self.micro.iter_mut()) {
            for v in p.patch.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{make_synthetic_dataset, SyntheticConfig};

    #[test]
    fn extract_write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            seed: 3,
            cases_per_domain: 2,
            clinical_dims: [64, 64, 2],
            micro_dims: [96, 96, 2],
            ..Default::default()
        };
        make_synthetic_dataset(&cfg).unwrap().write(dir.path(), 6, 3).unwrap();
        let manifest = DatasetManifest::load(&dir.path().join(super::super::manifest::DATASET_FILE)).unwrap();
        let sizes = PatchSizes {
            clinical: 32,
            micro: 64,
        };
        let set = extract_patches(&manifest, sizes, 0).unwrap();
        assert_eq!(set.clinical.len(), 12);
        assert_eq!(set.micro.len(), 12);
        assert!(set.clinical.iter().all(|p| p.patch.dims() == (32, 32) && p.patch.is_normalized()));
        assert!(set.micro.iter().all(|p| p.patch.dims() == (64, 64) && p.patch.is_normalized()));
        assert_eq!(set.intensity_maps.len(), 4);
        assert_eq!(set, extract_patches(&manifest, sizes, 5).unwrap());

        let cache = dir.path().join("cache");
        set.write(&cache).unwrap();
        let back = PatchSet::read(&cache).unwrap();
        assert_eq!(back, set.clone().quantized());

        let bytes = fs::read(cache.join("micro.f32")).unwrap();
        fs::write(cache.join("micro.f32"), &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(PatchSet::read(&cache), Err(Error::Parse { .. })));
    }
}
