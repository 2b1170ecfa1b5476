//! Procedural lung phantoms standing in for real scans.
//!
//! Each phantom instance is a body or specimen outline filled with
//! parenchyma texture and crossed by vessels, bronchi and nodules. Micro
//! volumes render an instance directly at the fine scale. Clinical volumes
//! render *other* instances at the fine scale, blur them, remap to the
//! clinical intensity scale, average 8x8 blocks and add noise; the fine
//! rendering is kept as ground truth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::SCALE_FACTOR;
use crate::nn::derive_seed;
use crate::par;

use super::io::save_volume;
use super::manifest::{DatasetManifest, VolumeRef};
use super::volume::{CtVolume, Modality, Spacing, SpacingUnit};

const AIR: f64 = -1000.0;
const TISSUE: f64 = 40.0;
const PARENCHYMA: f64 = -850.0;
const WALL: f64 = 0.0;
const NODULE: f64 = 30.0;

/// Half-range of tube endpoint depth around the slab centre, fine pixels.
const Z_SPREAD: f64 = 120.0;

/// Clinical in-plane spacing, mm.
const CLINICAL_PIXEL_MM: f64 = 0.625;
const CLINICAL_SLICE_MM: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub cases_per_domain: usize,
    /// Clinical volume size `[nx, ny, nz]`; the truth is 8x larger in-plane.
    pub clinical_dims: [usize; 3],
    pub micro_dims: [usize; 3],
    /// In-plane Gaussian blur applied before block averaging, fine pixels.
    pub blur_sigma: f64,
    pub noise_hu: f64,
    pub vessels: usize,
    pub bronchi: usize,
    pub nodules: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases_per_domain: 5,
            clinical_dims: [64, 64, 8],
            micro_dims: [320, 320, 6],
            blur_sigma: 4.0,
            noise_hu: 20.0,
            vessels: 40,
            bronchi: 8,
            nodules: 3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cases_per_domain == 0 {
            return Err(Error::param("cases_per_domain must be positive"));
        }
        if self.clinical_dims.iter().chain(&self.micro_dims).any(|&d| d == 0) {
            return Err(Error::param("volume dimensions must be positive"));
        }
        if !(self.blur_sigma >= 0.0 && self.noise_hu >= 0.0) {
            return Err(Error::param("blur and noise must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalCase {
    pub provenance: String,
    /// What gets written and trained on.
    pub lr: CtVolume,
    /// Block average of `hr_truth`, before noise.
    pub lr_clean: CtVolume,
    pub hr_truth: CtVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroCase {
    pub provenance: String,
    pub volume: CtVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub clinical: Vec<ClinicalCase>,
    pub micro: Vec<MicroCase>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Tube {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    /// Zero for solid vessels.
    wall: f64,
}

impl Tube {
    fn distance(&self, p: [f64; 3]) -> f64 {
        let ab = [self.b[0] - self.a[0], self.b[1] - self.a[1], self.b[2] - self.a[2]];
        let ap = [p[0] - self.a[0], p[1] - self.a[1], p[2] - self.a[2]];
        let len2 = ab.iter().map(|v| v * v).sum::<f64>();
        let t = if len2 > 0.0 {
            (ap.iter().zip(&ab).map(|(a, b)| a * b).sum::<f64>() / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    c: [f64; 3],
    radius: f64,
}

/// One procedural instance, in fine-pixel coordinates.
struct Phantom {
    body: Option<Ellipse>,
    lungs: Vec<Ellipse>,
    tubes: Vec<Tube>,
    blobs: Vec<Blob>,
    texture_seed: u64,
}

impl Phantom {
    fn random(seed: u64, cfg: &SyntheticConfig, n: [usize; 2], depth: f64, with_body: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (n[0] as f64, n[1] as f64);
        let mut jitter = |s: f64| 1.0 + rng.gen_range(-s..s);
        let (body, lungs) = if with_body {
            let body = Ellipse {
                cx: 0.5 * w,
                cy: 0.5 * h,
                rx: 0.46 * w * jitter(0.03),
                ry: 0.42 * h * jitter(0.03),
            };
            let lungs = [0.3, 0.7]
                .iter()
                .map(|&cx| Ellipse {
                    cx: cx * w,
                    cy: 0.5 * h,
                    rx: 0.15 * w * jitter(0.05),
                    ry: 0.33 * h * jitter(0.05),
                })
                .collect();
            (Some(body), lungs)
        } else {
            let specimen = Ellipse {
                cx: 0.5 * w,
                cy: 0.5 * h,
                rx: 0.44 * w * jitter(0.04),
                ry: 0.40 * h * jitter(0.04),
            };
            (None, vec![specimen])
        };
        let point_in_lung = |rng: &mut ChaCha8Rng| -> [f64; 3] {
            let l = lungs[rng.gen_range(0..lungs.len())];
            loop {
                let (x, y) = (
                    l.cx + rng.gen_range(-l.rx..l.rx),
                    l.cy + rng.gen_range(-l.ry..l.ry),
                );
                if l.contains(x, y) {
                    return [x, y, 0.5 * depth + rng.gen_range(-Z_SPREAD..Z_SPREAD)];
                }
            }
        };
        let mut tubes = Vec::new();
        for _ in 0..cfg.vessels {
            let (a, b) = (point_in_lung(&mut rng), point_in_lung(&mut rng));
            tubes.push(Tube {
                a,
                b,
                radius: rng.gen_range(2.0..6.0),
                wall: 0.0,
            });
        }
        for _ in 0..cfg.bronchi {
            let (a, b) = (point_in_lung(&mut rng), point_in_lung(&mut rng));
            let radius = rng.gen_range(4.0..10.0);
            tubes.push(Tube {
                a,
                b,
                radius,
                wall: 1.5 + 0.25 * radius,
            });
        }
        let blobs = (0..cfg.nodules)
            .map(|_| Blob {
                c: point_in_lung(&mut rng),
                radius: rng.gen_range(10.0..25.0),
            })
            .collect();
        Self {
            body,
            lungs,
            tubes,
            blobs,
            texture_seed: rng.gen(),
        }
    }

    fn hu(&self, x: f64, y: f64, z: f64, voxel: u64) -> f64 {
        if let Some(body) = &self.body {
            if !body.contains(x, y) {
                return AIR;
            }
        }
        if !self.lungs.iter().any(|l| l.contains(x, y)) {
            return if self.body.is_some() { TISSUE } else { AIR };
        }
        let p = [x, y, z];
        for b in &self.blobs {
            let d = (0..3).map(|i| (p[i] - b.c[i]).powi(2)).sum::<f64>().sqrt();
            if d < b.radius {
                return NODULE;
            }
        }
        for t in &self.tubes {
            let d = t.distance(p);
            if t.wall == 0.0 && d < t.radius {
                return TISSUE;
            }
            if t.wall > 0.0 && d < t.radius + t.wall {
                return if d < t.radius { AIR } else { WALL };
            }
        }
        // alveolar speckle plus a slow texture
        let speckle = (unit_hash(self.texture_seed ^ voxel) - 0.5) * 120.0;
        let slow = 25.0 * ((x * 0.07).sin() * (y * 0.05 + z * 0.03).cos());
        PARENCHYMA + speckle + slow
    }

    /// Renders `nz` slices spaced `z_step` fine pixels apart.
    fn render(&self, dims: [usize; 3], z_step: f64) -> Vec<f32> {
        let [nx, ny, nz] = dims;
        let slices = par::map_range(nz, |k| {
            let z = (k as f64 + 0.5) * z_step;
            let mut s = Vec::with_capacity(nx * ny);
            for py in 0..ny {
                for px in 0..nx {
                    let voxel = ((k * ny + py) * nx + px) as u64;
                    s.push(self.hu(px as f64 + 0.5, py as f64 + 0.5, z, voxel) as f32);
                }
            }
            s
        });
        slices.concat()
    }
}

/// splitmix64 finalizer mapped to `[0, 1)`.
fn unit_hash(mut z: u64) -> f64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable in-plane Gaussian blur of every axial slice, in f64.
fn blur_slices(data: &[f32], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    if sigma <= 0.0 {
        return data.iter().map(|&v| v as f64).collect();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let slices = par::map_range(nz, |z| {
        let src = &data[z * nx * ny..(z + 1) * nx * ny];
        let mut tmp = vec![0.0; nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                tmp[y * nx + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * src[y * nx + reflect(x as isize + j as isize - r, nx)] as f64)
                    .sum();
            }
        }
        let mut out = vec![0.0; nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                out[y * nx + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * tmp[reflect(y as isize + j as isize - r, ny) * nx + x])
                    .sum();
            }
        }
        out
    });
    slices.concat()
}

/// In-plane average of `f x f` blocks, accumulated in f64.
pub fn block_average(vol: &CtVolume, f: usize) -> Result<CtVolume> {
    let [nx, ny, nz] = vol.dims();
    if f == 0 || nx % f != 0 || ny % f != 0 {
        return Err(Error::shape(format!("{nx}x{ny} slices are not divisible by {f}")));
    }
    let (mx, my) = (nx / f, ny / f);
    let mut out = Vec::with_capacity(mx * my * nz);
    for z in 0..nz {
        for by in 0..my {
            for bx in 0..mx {
                let mut s = 0.0f64;
                for y in by * f..(by + 1) * f {
                    for x in bx * f..(bx + 1) * f {
                        s += vol.get(x, y, z) as f64;
                    }
                }
                out.push((s / (f * f) as f64) as f32);
            }
        }
    }
    let sp = vol.spacing;
    let spacing = Spacing {
        x: sp.x * f as f64,
        y: sp.y * f as f64,
        ..sp
    };
    CtVolume::new(vol.id.clone(), vol.modality, spacing, [mx, my, nz], out)
}

/// Scanner calibration offset applied to clinical intensities.
fn clinical_remap(hu: f64) -> f64 {
    0.97 * hu - 12.0
}

/// Monotone map from HU to micro scanner units: air ~100, parenchyma ~900,
/// soft tissue ~1400.
fn micro_remap(hu: f64) -> f64 {
    let lower = ((hu - AIR) / (PARENCHYMA - AIR)).clamp(0.0, 1.5);
    let upper = ((hu - PARENCHYMA) / (TISSUE - PARENCHYMA)).clamp(0.0, 1.2);
    100.0 + 800.0 * lower.min(1.0) + 500.0 * upper
}

pub fn provenance_id(instance: usize) -> String {
    format!("inst-{instance:03}")
}

pub fn make_synthetic_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let f = SCALE_FACTOR;
    let n = cfg.cases_per_domain;
    let fine_mm = CLINICAL_PIXEL_MM / f as f64;
    // clinical cases use instances 0..n, micro cases n..2n
    let clinical = (0..n)
        .map(|i| {
            let [lx, ly, lz] = cfg.clinical_dims;
            let dims = [lx * f, ly * f, lz];
            let z_step = CLINICAL_SLICE_MM / fine_mm;
            let ph = Phantom::random(
                derive_seed(cfg.seed, 100 + i as u64),
                cfg,
                [dims[0], dims[1]],
                lz as f64 * z_step,
                true,
            );
            let fine = ph.render(dims, z_step);
            let blurred = blur_slices(&fine, dims, cfg.blur_sigma);
            let truth_voxels = blurred.iter().map(|&v| clinical_remap(v) as f32).collect();
            let id = format!("clinical-{i:03}");
            let hr_truth = CtVolume::new(
                id.clone(),
                Modality::Clinical,
                Spacing::mm(fine_mm, fine_mm, CLINICAL_SLICE_MM),
                dims,
                truth_voxels,
            )?;
            let lr_clean = block_average(&hr_truth, f)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 200 + i as u64));
            let mut lr = lr_clean.clone();
            if cfg.noise_hu > 0.0 {
                let noise = Normal::new(0.0, cfg.noise_hu).map_err(|e| Error::param(e.to_string()))?;
                for v in lr.voxels_mut() {
                    *v = (*v as f64 + noise.sample(&mut rng)) as f32;
                }
            }
            Ok(ClinicalCase {
                provenance: provenance_id(i),
                lr,
                lr_clean,
                hr_truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let micro = (0..n)
        .map(|i| {
            let inst = n + i;
            let dims = cfg.micro_dims;
            let ph = Phantom::random(
                derive_seed(cfg.seed, 100 + inst as u64),
                cfg,
                [dims[0], dims[1]],
                dims[2] as f64,
                false,
            );
            let voxels = ph
                .render(dims, 1.0)
                .into_iter()
                .map(|v| micro_remap(v as f64).round() as f32)
                .collect();
            let um = fine_mm * 1000.0;
            let volume = CtVolume::new(
                format!("micro-{i:03}"),
                Modality::Micro,
                Spacing {
                    x: um,
                    y: um,
                    z: um,
                    unit: SpacingUnit::Um,
                },
                dims,
                voxels,
            )?;
            Ok(MicroCase {
                provenance: provenance_id(inst),
                volume,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { clinical, micro })
}

impl SyntheticDataset {
    /// Writes volumes (raw int16 + sidecar), ground truth (float NIfTI) and
    /// a `dataset.json` manifest under `dir`. The returned manifest has
    /// absolute paths.
    pub fn write(&self, dir: &Path, patches_per_case: usize, seed: u64) -> Result<DatasetManifest> {
        let mut manifest = DatasetManifest {
            clinical_volumes: Vec::new(),
            micro_volumes: Vec::new(),
            patches_per_case,
            seed,
            resample_each_epoch: false,
        };
        for c in &self.clinical {
            let path = format!("clinical/{}.raw", c.lr.id);
            let truth = format!("truth/{}.nii.gz", c.lr.id);
            save_volume(&c.lr, &dir.join(&path))?;
            save_volume(&c.hr_truth, &dir.join(&truth))?;
            manifest.clinical_volumes.push(VolumeRef {
                id: c.lr.id.clone(),
                path: path.into(),
                provenance: Some(c.provenance.clone()),
                hr_truth: Some(truth.into()),
            });
        }
        for m in &self.micro {
            let path = format!("micro/{}.raw", m.volume.id);
            save_volume(&m.volume, &dir.join(&path))?;
            manifest.micro_volumes.push(VolumeRef {
                id: m.volume.id.clone(),
                path: path.into(),
                provenance: Some(m.provenance.clone()),
                hr_truth: None,
            });
        }
        manifest.validate()?;
        let path = dir.join(super::manifest::DATASET_FILE);
        manifest.save(&path)?;
        DatasetManifest::load(&path)
    }
}
