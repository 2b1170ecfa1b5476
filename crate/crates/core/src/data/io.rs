//! Volume file formats: NIfTI-1 (`.nii`, `.nii.gz`) and raw little-endian
//! int16 with a JSON sidecar of the same stem.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::volume::{CtVolume, Modality, Spacing, SpacingUnit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    /// `[nx, ny, nz]`.
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub unit: SpacingUnit,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

impl VolumeFormat {
    pub fn of(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".raw") || name.ends_with(".json") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::Format(path.display().to_string()))
        }
    }
}

fn volume_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    for ext in [".nii.gz", ".nii", ".raw", ".json"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name.to_string()
}

fn parse_err(path: &Path, reason: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn load_volume(path: &Path, modality: Modality) -> Result<CtVolume> {
    match VolumeFormat::of(path)? {
        VolumeFormat::Nifti => load_nifti(path, modality),
        VolumeFormat::Raw => load_raw(path, modality),
    }
}

/// Writes `vol` in the format implied by the extension of `path`.
pub fn save_volume(vol: &CtVolume, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    match VolumeFormat::of(path)? {
        VolumeFormat::Nifti => save_nifti(vol, path),
        VolumeFormat::Raw => save_raw(vol, path),
    }
}

fn load_nifti(path: &Path, modality: Modality) -> Result<CtVolume> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| parse_err(path, e))?;
    let header: NiftiHeader = obj.header().clone();
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| parse_err(path, e))?;
    let shape = arr.shape().to_vec();
    let dims = match shape[..] {
        [nx, ny] => [nx, ny, 1],
        [nx, ny, nz] => [nx, ny, nz],
        [nx, ny, nz, 1] => [nx, ny, nz],
        _ => return Err(parse_err(path, format!("unsupported NIfTI dimensions {shape:?}"))),
    };
    let mut voxels = Vec::with_capacity(arr.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = match shape.len() {
                    2 => arr[&[x, y][..]],
                    3 => arr[&[x, y, z][..]],
                    _ => arr[&[x, y, z, 0][..]],
                };
                voxels.push(v);
            }
        }
    }
    let (unit, scale) = match header.xyzt_units & 0x07 {
        3 => (SpacingUnit::Um, 1.0),
        1 => (SpacingUnit::Mm, 1000.0),
        _ => (SpacingUnit::Mm, 1.0),
    };
    let pix = |i: usize| {
        let v = header.pixdim[i] as f64 * scale;
        if v > 0.0 {
            v
        } else {
            1.0
        }
    };
    let spacing = Spacing {
        x: pix(1),
        y: pix(2),
        z: pix(3),
        unit,
    };
    CtVolume::new(volume_id(path), modality, spacing, dims, voxels)
}

fn save_nifti(vol: &CtVolume, path: &Path) -> Result<()> {
    let [nx, ny, nz] = vol.dims();
    let arr = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| vol.get(x, y, z));
    let mut header = NiftiHeader::default();
    header.pixdim = [
        1.0,
        vol.spacing.x as f32,
        vol.spacing.y as f32,
        vol.spacing.z as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    header.xyzt_units = match vol.spacing.unit {
        SpacingUnit::Mm => 2,
        SpacingUnit::Um => 3,
    };
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| parse_err(path, e))
}

/// Sidecar and data paths for either member of a raw pair.
pub fn raw_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

fn load_raw(path: &Path, modality: Modality) -> Result<CtVolume> {
    let (sidecar_path, data_path) = raw_pair(path);
    let text = fs::read_to_string(&sidecar_path).map_err(|e| parse_err(&sidecar_path, e))?;
    let sidecar: RawSidecar = serde_json::from_str(&text).map_err(|e| parse_err(&sidecar_path, e))?;
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * 2 {
        return Err(parse_err(
            &data_path,
            format!("expected {} bytes for shape {:?}, found {}", n * 2, sidecar.shape, bytes.len()),
        ));
    }
    let voxels = bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
        .collect();
    let [sx, sy, sz] = sidecar.spacing;
    let spacing = Spacing {
        x: sx,
        y: sy,
        z: sz,
        unit: sidecar.unit,
    };
    CtVolume::new(volume_id(path), modality, spacing, sidecar.shape, voxels)
}

/// Values are rounded and saturated to the int16 range.
fn save_raw(vol: &CtVolume, path: &Path) -> Result<()> {
    let (sidecar_path, data_path) = raw_pair(path);
    let sidecar = RawSidecar {
        shape: vol.dims(),
        spacing: [vol.spacing.x, vol.spacing.y, vol.spacing.z],
        unit: vol.spacing.unit,
        modality: vol.modality,
    };
    let mut bytes = Vec::with_capacity(vol.voxels().len() * 2);
    for &v in vol.voxels() {
        let q = v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    write_atomic(&data_path, &bytes)?;
    write_atomic(&sidecar_path, serde_json::to_string_pretty(&sidecar)?.as_bytes())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
