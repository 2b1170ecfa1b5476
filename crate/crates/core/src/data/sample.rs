//! Random 2D patch sampling from axial slices, restricted to the lung.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::par;
use crate::patch::ImagePatch;

use super::volume::{CtVolume, LungMask, Modality};

/// Attempts allowed per requested patch before giving up.
pub const ATTEMPTS_PER_PATCH: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSample {
    pub patch: ImagePatch,
    pub volume_id: String,
    pub slice_index: usize,
    /// `(row, col)` of the top-left corner within the slice.
    pub origin: (usize, usize),
    pub modality: Modality,
}

/// Summed-area table of one mask slice, `(ny + 1) x (nx + 1)`.
struct Integral {
    nx: usize,
    table: Vec<u32>,
}

impl Integral {
    fn new(mask: &[bool], nx: usize, ny: usize) -> Self {
        let w = nx + 1;
        let mut table = vec![0u32; w * (ny + 1)];
        for y in 0..ny {
            let mut row = 0;
            for x in 0..nx {
                row += mask[y * nx + x] as u32;
                table[(y + 1) * w + x + 1] = table[y * w + x + 1] + row;
            }
        }
        Self { nx, table }
    }

    fn sum(&self, row: usize, col: usize, size: usize) -> u32 {
        let w = self.nx + 1;
        let (r1, c1) = (row + size, col + size);
        self.table[r1 * w + c1] + self.table[row * w + col] - self.table[row * w + c1] - self.table[r1 * w + col]
    }
}

/// Draws `count` square patches of side `size` from a normalized volume.
/// A location is accepted when at least half of its pixels are inside the
/// mask. Fails after `ATTEMPTS_PER_PATCH * count` rejected draws.
pub fn sample_patches(
    vol: &CtVolume,
    mask: &LungMask,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    let [nx, ny, nz] = vol.dims();
    if mask.dims() != vol.dims() {
        return Err(Error::shape(format!(
            "mask {:?} does not match volume {:?}",
            mask.dims(),
            vol.dims()
        )));
    }
    if size == 0 || size > nx || size > ny {
        return Err(Error::param(format!("patch size {size} does not fit {ny}x{nx} slices")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if mask.count() == 0 {
        return Err(Error::Sampling(format!("{}: empty mask", vol.id)));
    }
    let integrals: Vec<Integral> = (0..nz).map(|z| Integral::new(mask.slice_data(z), nx, ny)).collect();
    let needed = (size * size).div_ceil(2) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let budget = ATTEMPTS_PER_PATCH * count;
    let mut attempts = 0;
    while out.len() < count {
        if attempts == budget {
            return Err(Error::Sampling(format!(
                "{}: only {} of {count} patches after {budget} attempts",
                vol.id,
                out.len()
            )));
        }
        attempts += 1;
        let z = rng.gen_range(0..nz);
        let row = rng.gen_range(0..=ny - size);
        let col = rng.gen_range(0..=nx - size);
        if integrals[z].sum(row, col, size) < needed {
            continue;
        }
        let slice = vol.slice_data(z);
        let patch = ImagePatch::from_fn(size, size, |r, c| {
            (slice[(row + r) * nx + col + c] as f64).clamp(-1.0, 1.0)
        });
        out.push(PatchSample {
            patch,
            volume_id: vol.id.clone(),
            slice_index: z,
            origin: (row, col),
            modality: vol.modality,
        });
    }
    Ok(out)
}

/// Samples every volume with its own derived seed; results are
/// concatenated in input order.
pub fn sample_many(
    items: &[(CtVolume, LungMask)],
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    let per = par::map_range(items.len(), |i| {
        let (v, m) = &items[i];
        sample_patches(v, m, size, count, derive_seed(seed, i as u64))
    });
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::volume::Spacing;

    fn ramp(dims: [usize; 3]) -> CtVolume {
        let n = dims.iter().product::<usize>();
        let v = (0..n).map(|i| (i as f32 / n as f32) * 2.0 - 1.0).collect();
        CtVolume::new("ramp", Modality::Clinical, Spacing::mm(1.0, 1.0, 1.0), dims, v).unwrap()
    }

    #[test]
    fn patches_have_size_and_respect_the_mask() {
        let vol = ramp([20, 16, 3]);
        let data = (0..vol.voxels().len()).map(|i| i % 20 < 10).collect();
        let mask = LungMask::new("ramp", vol.dims(), data).unwrap();
        let ps = sample_patches(&vol, &mask, 8, 50, 3).unwrap();
        assert_eq!(ps.len(), 50);
        for p in &ps {
            assert_eq!(p.patch.dims(), (8, 8));
            let (r, c) = p.origin;
            let inside = (0..8)
                .flat_map(|i| (0..8).map(move |j| (i, j)))
                .filter(|&(i, j)| mask.get(c + j, r + i, p.slice_index))
                .count();
            assert!(inside * 2 >= 64);
            assert_eq!(p.patch.get(0, 0), vol.get(c, r, p.slice_index) as f64);
        }
        assert_eq!(ps, sample_patches(&vol, &mask, 8, 50, 3).unwrap());
    }

    #[test]
    fn empty_mask_is_a_sampling_error() {
        let vol = ramp([10, 10, 2]);
        let mask = LungMask::new("ramp", vol.dims(), vec![false; 200]).unwrap();
        assert!(matches!(sample_patches(&vol, &mask, 4, 3, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn tiny_mask_exhausts_attempts() {
        let vol = ramp([10, 10, 1]);
        let mut data = vec![false; 100];
        data[55] = true;
        let mask = LungMask::new("ramp", vol.dims(), data).unwrap();
        assert!(matches!(sample_patches(&vol, &mask, 4, 3, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let vol = ramp([10, 10, 1]);
        let mask = LungMask::full(&vol);
        assert!(matches!(sample_patches(&vol, &mask, 11, 1, 0), Err(Error::Param(_))));
    }
}
