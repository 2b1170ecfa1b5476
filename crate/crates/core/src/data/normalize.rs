//! Percentile intensity normalization to `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::volume::{CtVolume, LungMask};

pub const LOWER_PERCENTILE: f64 = 0.5;
pub const UPPER_PERCENTILE: f64 = 99.5;

/// Affine map sending `lo` to -1 and `hi` to 1, with clipping outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityMap {
    pub lo: f64,
    pub hi: f64,
}

impl IntensityMap {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
            return Err(Error::Normalization(format!("degenerate intensity range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        let c = v.clamp(self.lo, self.hi);
        2.0 * (c - self.lo) / (self.hi - self.lo) - 1.0
    }

    #[inline]
    pub fn invert(&self, n: f64) -> f64 {
        self.lo + (n + 1.0) * 0.5 * (self.hi - self.lo)
    }
}

/// Percentile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Fits the map from the 0.5th and 99.5th percentiles of the voxels inside
/// `mask` (all voxels when `None`).
pub fn fit_intensity_map(vol: &CtVolume, mask: Option<&LungMask>) -> Result<IntensityMap> {
    let mut values: Vec<f64> = match mask {
        Some(m) => {
            if m.dims() != vol.dims() {
                return Err(Error::shape(format!(
                    "mask {:?} does not match volume {:?}",
                    m.dims(),
                    vol.dims()
                )));
            }
            vol.voxels()
                .iter()
                .zip(m.data())
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v as f64)
                .collect()
        }
        None => vol.voxels().iter().map(|&v| v as f64).collect(),
    };
    if values.is_empty() {
        return Err(Error::Normalization(format!("{}: empty mask", vol.id)));
    }
    values.sort_by(|a, b| a.total_cmp(b));
    IntensityMap::new(
        percentile(&values, LOWER_PERCENTILE),
        percentile(&values, UPPER_PERCENTILE),
    )
    .map_err(|e| Error::Normalization(format!("{}: {e}", vol.id)))
}

/// Normalizes the whole volume with a map fitted inside `mask`.
pub fn normalize(vol: &CtVolume, mask: Option<&LungMask>) -> Result<(CtVolume, IntensityMap)> {
    let map = fit_intensity_map(vol, mask)?;
    Ok((apply_map(vol, &map), map))
}

pub fn apply_map(vol: &CtVolume, map: &IntensityMap) -> CtVolume {
    let mut out = vol.clone();
    for v in out.voxels_mut() {
        *v = map.apply(*v as f64) as f32;
    }
    out
}

pub fn denormalize(vol: &CtVolume, map: &IntensityMap) -> CtVolume {
    let mut out = vol.clone();
    for v in out.voxels_mut() {
        *v = map.invert(*v as f64) as f32;
    }
    out
}
