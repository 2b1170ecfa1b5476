use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::ImagePatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Clinical,
    Micro,
    /// Output of super-resolving a clinical volume.
    SyntheticMicro,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clinical" => Ok(Modality::Clinical),
            "micro" => Ok(Modality::Micro),
            "synthetic-micro" => Ok(Modality::SyntheticMicro),
            other => Err(Error::param(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpacingUnit {
    Mm,
    Um,
}

/// Voxel size along x, y (in-plane) and z (between axial slices).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub unit: SpacingUnit,
}

impl Spacing {
    pub fn mm(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            unit: SpacingUnit::Mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.x, self.y, self.z].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::param(format!("voxel spacing must be positive, got {self:?}")))
        }
    }
}

/// A scalar volume stored x-fastest: `index = (z * ny + y) * nx + x`.
/// Axial slice `z` is an `ny x nx` image.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub id: String,
    pub modality: Modality,
    pub spacing: Spacing,
    dims: [usize; 3],
    voxels: Vec<f32>,
}

impl CtVolume {
    pub fn new(
        id: impl Into<String>,
        modality: Modality,
        spacing: Spacing,
        dims: [usize; 3],
        voxels: Vec<f32>,
    ) -> Result<Self> {
        spacing.validate()?;
        if dims.contains(&0) {
            return Err(Error::shape(format!("empty volume {dims:?}")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "volume {dims:?} needs {} voxels, got {}",
                dims.iter().product::<usize>(),
                voxels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            modality,
            spacing,
            dims,
            voxels,
        })
    }

    /// Stacks equally sized axial slices.
    pub fn from_slices(
        id: impl Into<String>,
        modality: Modality,
        spacing: Spacing,
        slices: &[ImagePatch],
    ) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::shape("no slices"))?;
        let (ny, nx) = first.dims();
        let mut voxels = Vec::with_capacity(nx * ny * slices.len());
        for s in slices {
            if s.dims() != (ny, nx) {
                return Err(Error::shape("slices differ in size"));
            }
            voxels.extend(s.data().iter().map(|&v| v as f32));
        }
        Self::new(id, modality, spacing, [nx, ny, slices.len()], voxels)
    }

    /// `[nx, ny, nz]`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn slice_data(&self, z: usize) -> &[f32] {
        &self.voxels[z * self.slice_len()..(z + 1) * self.slice_len()]
    }

    /// Axial slice `z` as an `ny x nx` patch.
    pub fn slice(&self, z: usize) -> ImagePatch {
        let data = self.slice_data(z).iter().map(|&v| v as f64).collect();
        ImagePatch::new(self.dims[1], self.dims[0], data).expect("slice values are finite")
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Binary lung mask with the same layout as its source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LungMask {
    pub source_id: String,
    dims: [usize; 3],
    mask: Vec<bool>,
}

impl LungMask {
    pub fn new(source_id: impl Into<String>, dims: [usize; 3], mask: Vec<bool>) -> Result<Self> {
        if mask.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("mask length does not match its dimensions"));
        }
        Ok(Self {
            source_id: source_id.into(),
            dims,
            mask,
        })
    }

    /// Mask covering the whole volume.
    pub fn full(vol: &CtVolume) -> Self {
        Self {
            source_id: vol.id.clone(),
            dims: vol.dims(),
            mask: vec![true; vol.voxels().len()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.mask[(z * self.dims[1] + y) * self.dims[0] + x]
    }

    pub fn slice_data(&self, z: usize) -> &[bool] {
        let n = self.dims[0] * self.dims[1];
        &self.mask[z * n..(z + 1) * n]
    }
}
