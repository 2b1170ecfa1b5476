//! Threshold-and-morphology lung segmentation.
//!
//! Clinical volumes are thresholded at a fixed HU level and air connected
//! to the in-plane border (outside the body) is discarded. Micro volumes
//! have no calibrated scale, so the specimen is separated from the
//! surrounding air with Otsu's threshold. Both then get a 3D ball closing,
//! per-slice hole filling, and only the largest components are kept.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::volume::{CtVolume, LungMask, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    /// Voxels below this value are lung candidates in clinical volumes.
    pub clinical_threshold_hu: f32,
    pub closing_radius: usize,
    pub keep_components: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            clinical_threshold_hu: -400.0,
            closing_radius: 2,
            keep_components: 2,
        }
    }
}

pub fn segment_lung(vol: &CtVolume) -> Result<LungMask> {
    segment_lung_with(vol, &SegmentParams::default())
}

pub fn segment_lung_with(vol: &CtVolume, params: &SegmentParams) -> Result<LungMask> {
    let dims = vol.dims();
    let mut mask: Vec<bool> = match vol.modality {
        Modality::Clinical => {
            let t = params.clinical_threshold_hu;
            let below: Vec<bool> = vol.voxels().iter().map(|&v| v < t).collect();
            remove_border_components(&below, dims)
        }
        Modality::Micro | Modality::SyntheticMicro => {
            let t = otsu_threshold(vol.voxels())
                .ok_or_else(|| Error::SegmentationFailed(format!("{}: constant volume", vol.id)))?;
            vol.voxels().iter().map(|&v| v > t).collect()
        }
    };
    if !mask.iter().any(|&m| m) {
        return Err(Error::SegmentationFailed(format!("{}: nothing passed the threshold", vol.id)));
    }
    mask = close(&mask, dims, params.closing_radius);
    fill_holes_per_slice(&mut mask, dims);
    mask = keep_largest(&mask, dims, params.keep_components);
    if !mask.iter().any(|&m| m) {
        return Err(Error::SegmentationFailed(format!("{}: empty mask after morphology", vol.id)));
    }
    LungMask::new(vol.id.clone(), dims, mask)
}

/// Otsu's threshold over a 256-bin histogram. `None` for constant input.
pub fn otsu_threshold(values: &[f32]) -> Option<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) as f64 / BINS as f64;
    let mut hist = [0u64; BINS];
    for &v in values {
        let b = (((v - lo) as f64 / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    Some(lo + ((best_bin + 1) as f64 * width) as f32)
}

const NEIGHBORS_6: [(isize, isize, isize); 6] = [
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
];

/// Labels 6-connected foreground components; returns labels (0 = background)
/// and component sizes indexed by `label - 1`.
pub fn label_components(mask: &[bool], dims: [usize; 3]) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for (dx, dy, dz) in NEIGHBORS_6 {
                let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                    continue;
                }
                let j = (zz as usize * ny + yy as usize) * nx + xx as usize;
                if mask[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Drops components touching any of the four in-plane faces.
fn remove_border_components(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let (labels, sizes) = label_components(mask, dims);
    let mut touches = vec![false; sizes.len() + 1];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if x == 0 || y == 0 || x == nx - 1 || y == ny - 1 {
                    touches[labels[(z * ny + y) * nx + x] as usize] = true;
                }
            }
        }
    }
    labels.iter().map(|&l| l != 0 && !touches[l as usize]).collect()
}

fn ball_offsets(radius: usize) -> Vec<(isize, isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Dilation (`grow = true`) or erosion with a ball. Out-of-volume
/// neighbours are ignored.
fn morph(mask: &[bool], dims: [usize; 3], offsets: &[(isize, isize, isize)], grow: bool) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                let mut hit = !grow;
                for &(dx, dy, dz) in offsets {
                    let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                        continue;
                    }
                    let v = mask[(zz as usize * ny + yy as usize) * nx + xx as usize];
                    if grow && v {
                        hit = true;
                        break;
                    }
                    if !grow && !v {
                        hit = false;
                        break;
                    }
                }
                out[i] = hit;
            }
        }
    }
    out
}

pub fn close(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let offsets = ball_offsets(radius);
    let dilated = morph(mask, dims, &offsets, true);
    morph(&dilated, dims, &offsets, false)
}

/// Fills background regions of each axial slice that are not 4-connected
/// to the slice border.
pub fn fill_holes_per_slice(mask: &mut [bool], dims: [usize; 3]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny;
    let mut outside = vec![false; n];
    let mut queue = VecDeque::new();
    for z in 0..nz {
        let slice = &mut mask[z * n..(z + 1) * n];
        outside.fill(false);
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                if (x == 0 || y == 0 || x == nx - 1 || y == ny - 1) && !slice[i] && !outside[i] {
                    outside[i] = true;
                    queue.push_back(i);
                }
            }
        }
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % nx, i / nx);
            let mut visit = |j: usize| {
                if !slice[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
        }
        for (m, &o) in slice.iter_mut().zip(&outside) {
            *m = !o;
        }
    }
}

pub fn keep_largest(mask: &[bool], dims: [usize; 3], keep: usize) -> Vec<bool> {
    let (labels, sizes) = label_components(mask, dims);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // ties broken by label so the result is deterministic
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut kept = vec![false; sizes.len() + 1];
    for &c in order.iter().take(keep) {
        kept[c + 1] = true;
    }
    labels.iter().map(|&l| kept[l as usize]).collect()
}
