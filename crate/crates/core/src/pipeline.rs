//! Dataset-level super-resolution, evaluation and montages.
//!
//! `super_resolve_dataset` writes one SR volume per clinical volume, in
//! Hounsfield units and in the input's file format, next to an
//! `sr_index.json` that records the intensity map used for each volume.
//! `evaluate_dataset` reads that index back and scores every volume.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::normalize::apply_map;
use crate::data::{
    denormalize, load_volume, normalize, save_volume, segment_lung, CtVolume, DatasetManifest, IntensityMap,
    Modality, VolumeRef,
};
use crate::error::{Error, Result};
use crate::eval::{
    bicubic_upsample, bicubic_volume, config_digest, emit_montage, volume_consistency, volume_oracle,
    MetricsReport, ReportSettings,
};
use crate::infer::super_resolve_volume;
use crate::loss::SsimParams;
use crate::nn::ModelBundle;
use crate::train::TrainConfig;

pub const SR_INDEX_FILE: &str = "sr_index.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrEntry {
    pub id: String,
    pub lr_path: PathBuf,
    pub sr_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_truth: Option<PathBuf>,
    pub map: IntensityMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrIndex {
    pub entries: Vec<SrEntry>,
    pub tile_size: usize,
    pub overlap: usize,
    pub training_ssim: SsimParams,
    pub config_digest: String,
}

impl SrIndex {
    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::data::io::write_atomic(&dir.join(SR_INDEX_FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Reads `sr_index.json` from `dir`; relative SR paths resolve against `dir`.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SR_INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut index: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        for e in &mut index.entries {
            e.sr_path = dir.join(&e.sr_path);
        }
        Ok(index)
    }
}

/// Loads a clinical volume and normalizes it with a map fitted inside its
/// lung mask.
pub fn prepare_clinical(v: &VolumeRef) -> Result<(CtVolume, IntensityMap)> {
    let mut vol = load_volume(&v.path, Modality::Clinical)?;
    vol.id = v.id.clone();
    let mask = segment_lung(&vol)?;
    normalize(&vol, Some(&mask))
}

fn sr_file_name(id: &str, lr_path: &Path) -> String {
    let name = lr_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    let ext = if name.ends_with(".nii.gz") {
        "nii.gz"
    } else if name.ends_with(".nii") {
        "nii"
    } else {
        "raw"
    };
    format!("{id}-sr.{ext}")
}

/// Digest of everything that shaped an SR run.
pub fn run_digest(config: &TrainConfig, tile_size: usize, overlap: usize) -> Result<String> {
    config_digest(&(config, tile_size, overlap, SsimParams::standard()))
}

/// Super-resolves every clinical volume of `manifest` into `out_dir`.
pub fn super_resolve_dataset(
    bundle: &ModelBundle,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    tile_size: usize,
    overlap: usize,
    out_dir: &Path,
) -> Result<SrIndex> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let g1 = bundle.super_resolver()?;
    let mut entries = Vec::new();
    for v in &manifest.clinical_volumes {
        let (lr, map) = prepare_clinical(v)?;
        let sr = super_resolve_volume(g1.as_ref(), &lr, tile_size, overlap)?;
        let name = sr_file_name(&v.id, &v.path);
        save_volume(&denormalize(&sr, &map), &out_dir.join(&name))?;
        entries.push(SrEntry {
            id: v.id.clone(),
            lr_path: v.path.clone(),
            sr_path: name.into(),
            hr_truth: v.hr_truth.clone(),
            map,
        });
    }
    let index = SrIndex {
        entries,
        tile_size,
        overlap,
        training_ssim: config.ssim,
        config_digest: run_digest(config, tile_size, overlap)?,
    };
    index.write(out_dir)?;
    Ok(index)
}

/// LR, SR and (if known) truth volumes of one entry, all on the LR's
/// normalized scale.
pub struct NormalizedEntry {
    pub lr: CtVolume,
    pub sr: CtVolume,
    pub truth: Option<CtVolume>,
}

pub fn load_entry(e: &SrEntry) -> Result<NormalizedEntry> {
    let lr = apply_map(&load_volume(&e.lr_path, Modality::Clinical)?, &e.map);
    let sr = apply_map(&load_volume(&e.sr_path, Modality::SyntheticMicro)?, &e.map);
    let truth = match &e.hr_truth {
        Some(p) => Some(apply_map(&load_volume(p, Modality::Micro)?, &e.map)),
        None => None,
    };
    Ok(NormalizedEntry { lr, sr, truth })
}

/// Scores every SR volume listed in `sr_dir` against its LR input, the
/// bicubic baseline and, where available, the ground truth.
pub fn evaluate_dataset(sr_dir: &Path) -> Result<MetricsReport> {
    let index = SrIndex::read(sr_dir)?;
    let scored = crate::par::try_map(&index.entries, |e| {
        let n = load_entry(e)?;
        let bicubic = bicubic_volume(&n.lr)?;
        let oracle = match &n.truth {
            Some(t) => Some((volume_oracle(&n.sr, t)?, volume_oracle(&bicubic, t)?)),
            None => None,
        };
        Ok::<_, Error>((
            e.id.clone(),
            volume_consistency(&n.lr, &n.sr)?,
            volume_consistency(&n.lr, &bicubic)?,
            oracle,
        ))
    })?;
    let mut report = MetricsReport {
        per_volume: BTreeMap::new(),
        oracle: None,
        bicubic_per_volume: BTreeMap::new(),
        bicubic_oracle: None,
        settings: ReportSettings {
            training_ssim: index.training_ssim,
            reporting_ssim: SsimParams::standard(),
            tile_size: index.tile_size,
            overlap: index.overlap,
        },
        config_digest: index.config_digest.clone(),
    };
    for (id, sr, bic, oracle) in scored {
        report.per_volume.insert(id.clone(), sr);
        report.bicubic_per_volume.insert(id.clone(), bic);
        if let Some((o_sr, o_bic)) = oracle {
            report.oracle.get_or_insert_with(BTreeMap::new).insert(id.clone(), o_sr);
            report.bicubic_oracle.get_or_insert_with(BTreeMap::new).insert(id, o_bic);
        }
    }
    Ok(report)
}

/// Writes `<id>-montage.png` (LR, SR, bicubic) for every volume in the
/// index, using axial slice `slice` or the middle one.
pub fn write_montages(sr_dir: &Path, out_dir: &Path, slice: Option<usize>) -> Result<Vec<PathBuf>> {
    let index = SrIndex::read(sr_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    crate::par::try_map(&index.entries, |e| {
        let n = load_entry(e)?;
        let nz = n.lr.dims()[2];
        let z = slice.unwrap_or(nz / 2);
        if z >= nz {
            return Err(Error::param(format!("slice {z} is outside {} ({nz} slices)", e.id)));
        }
        let lr = n.lr.slice(z);
        let path = out_dir.join(format!("{}-montage.png", e.id));
        emit_montage(&lr, &n.sr.slice(z), &bicubic_upsample(&lr, 8)?, &path)?;
        Ok(path)
    })
}
