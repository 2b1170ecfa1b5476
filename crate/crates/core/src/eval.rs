//! Evaluation: downsample-consistency and ground-truth metrics, a bicubic
//! baseline, comparison montages and 16-bit slice export.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::io::write_atomic;
use crate::data::CtVolume;
use crate::error::{Error, Result};
use crate::loss::{avg_downsample, mse, nn_upsample, ssim_index, SsimParams, SCALE_FACTOR};
use crate::par;
use crate::patch::ImagePatch;

/// Width of the normalized intensity range.
pub const PSNR_PEAK: f64 = 2.0;
/// Reported in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP_DB)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMetrics {
    pub consistency_mse: f64,
    pub consistency_psnr: f64,
    pub consistency_ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleMetrics {
    pub hr_mse: f64,
    pub hr_psnr: f64,
    pub hr_ssim: f64,
}

/// Compares `x` with the block average of its super-resolved version.
pub fn consistency_metrics(x: &ImagePatch, x_sr: &ImagePatch) -> Result<ConsistencyMetrics> {
    let (h, w) = x.dims();
    if x_sr.dims() != (h * SCALE_FACTOR, w * SCALE_FACTOR) {
        return Err(Error::shape(format!(
            "super-resolved slice is {:?}, expected {}x{:?}",
            x_sr.dims(),
            SCALE_FACTOR,
            x.dims()
        )));
    }
    let down = avg_downsample(x_sr, SCALE_FACTOR)?;
    let m = mse(x, &down)?;
    Ok(ConsistencyMetrics {
        consistency_mse: m,
        consistency_psnr: psnr(m),
        consistency_ssim: ssim_index(x, &down, &SsimParams::standard())?,
    })
}

pub fn oracle_metrics(x_sr: &ImagePatch, hr_truth: &ImagePatch) -> Result<OracleMetrics> {
    let m = mse(x_sr, hr_truth)?;
    Ok(OracleMetrics {
        hr_mse: m,
        hr_psnr: psnr(m),
        hr_ssim: ssim_index(x_sr, hr_truth, &SsimParams::standard())?,
    })
}

fn check_slices(a: &CtVolume, b: &CtVolume, scale: usize) -> Result<()> {
    let [ax, ay, az] = a.dims();
    if b.dims() != [ax * scale, ay * scale, az] {
        return Err(Error::shape(format!(
            "{} is {:?}, expected {:?}",
            b.id,
            b.dims(),
            [ax * scale, ay * scale, az]
        )));
    }
    Ok(())
}

/// Slice-wise metrics pooled over a volume: the MSE over all voxels, PSNR
/// from that MSE, and the mean per-slice SSIM.
fn pool(per_slice: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = per_slice.len() as f64;
    let m = per_slice.iter().map(|s| s.0).sum::<f64>() / n;
    let s = per_slice.iter().map(|s| s.1).sum::<f64>() / n;
    (m, psnr(m), s)
}

pub fn volume_consistency(lr: &CtVolume, sr: &CtVolume) -> Result<ConsistencyMetrics> {
    check_slices(lr, sr, SCALE_FACTOR)?;
    let zs: Vec<usize> = (0..lr.dims()[2]).collect();
    let per = par::try_map(&zs, |&z| {
        consistency_metrics(&lr.slice(z), &sr.slice(z)).map(|m| (m.consistency_mse, m.consistency_ssim))
    })?;
    let (m, p, s) = pool(&per);
    Ok(ConsistencyMetrics {
        consistency_mse: m,
        consistency_psnr: p,
        consistency_ssim: s,
    })
}

pub fn volume_oracle(sr: &CtVolume, truth: &CtVolume) -> Result<OracleMetrics> {
    check_slices(truth, sr, 1)?;
    let zs: Vec<usize> = (0..sr.dims()[2]).collect();
    let per = par::try_map(&zs, |&z| {
        oracle_metrics(&sr.slice(z), &truth.slice(z)).map(|m| (m.hr_mse, m.hr_ssim))
    })?;
    let (m, p, s) = pool(&per);
    Ok(OracleMetrics {
        hr_mse: m,
        hr_psnr: p,
        hr_ssim: s,
    })
}

/// Catmull-Rom upsampling by `factor`. Values are treated as lying in
/// `[-1, 1]`; overshoot beyond that range is clipped.
pub fn bicubic_upsample(lr: &ImagePatch, factor: usize) -> Result<ImagePatch> {
    if factor == 0 {
        return Err(Error::param("upsampling factor must be positive"));
    }
    let (h, w) = lr.dims();
    let buf: Vec<f32> = lr.data().iter().map(|&v| ((v + 1.0) * 0.5) as f32).collect();
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions");
    let up = image::imageops::resize(&img, (w * factor) as u32, (h * factor) as u32, FilterType::CatmullRom);
    ImagePatch::new(
        h * factor,
        w * factor,
        up.into_raw().into_iter().map(|v| v as f64 * 2.0 - 1.0).collect(),
    )
}

pub fn bicubic_volume(vol: &CtVolume) -> Result<CtVolume> {
    let zs: Vec<usize> = (0..vol.dims()[2]).collect();
    let slices = par::try_map(&zs, |&z| bicubic_upsample(&vol.slice(z), SCALE_FACTOR))?;
    let f = SCALE_FACTOR as f64;
    let spacing = crate::data::Spacing {
        x: vol.spacing.x / f,
        y: vol.spacing.y / f,
        ..vol.spacing
    };
    CtVolume::from_slices(format!("{}-bicubic", vol.id), vol.modality, spacing, &slices)
}

/// Settings that shaped a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub training_ssim: SsimParams,
    pub reporting_ssim: SsimParams,
    pub tile_size: usize,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_volume: BTreeMap<String, ConsistencyMetrics>,
    /// Present only when ground truth exists for some volume.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<BTreeMap<String, OracleMetrics>>,
    /// The same metrics for the bicubic baseline.
    pub bicubic_per_volume: BTreeMap<String, ConsistencyMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bicubic_oracle: Option<BTreeMap<String, OracleMetrics>>,
    pub settings: ReportSettings,
    pub config_digest: String,
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_digest(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl MetricsReport {
    pub fn mean_consistency_mse(&self) -> f64 {
        let n = self.per_volume.len().max(1) as f64;
        self.per_volume.values().map(|m| m.consistency_mse).sum::<f64>() / n
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn to_gray8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

const GLYPH_H: usize = 7;

fn glyph(c: char) -> [u8; GLYPH_H] {
    match c {
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01111, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b01111],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        _ => [0; GLYPH_H],
    }
}

fn draw_label(img: &mut ImageBuffer<Luma<u8>, Vec<u8>>, x0: u32, text: &str, scale: u32) {
    let mut x = x0 + scale;
    for ch in text.chars() {
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..5u32 {
                if bits >> (4 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put_pixel(x + col * scale + dx, scale + row as u32 * scale + dy, Luma([255]));
                        }
                    }
                }
            }
        }
        x += 6 * scale;
    }
}

/// Writes `LR | SR | BICUBIC` side by side under a label band. The LR
/// panel is shown nearest-neighbour enlarged to the SR size.
pub fn emit_montage(lr: &ImagePatch, sr: &ImagePatch, baseline: &ImagePatch, path: &Path) -> Result<()> {
    if sr.dims() != baseline.dims() {
        return Err(Error::shape(format!(
            "montage panels differ: {:?} vs {:?}",
            sr.dims(),
            baseline.dims()
        )));
    }
    let (h, w) = sr.dims();
    if (lr.height() * SCALE_FACTOR, lr.width() * SCALE_FACTOR) != (h, w) {
        return Err(Error::shape(format!(
            "low-resolution panel {:?} is not 1/{SCALE_FACTOR} of {:?}",
            lr.dims(),
            sr.dims()
        )));
    }
    let lr_big = nn_upsample(lr, SCALE_FACTOR)?;
    let scale = (w as u32 / 96).max(1);
    let band = (GLYPH_H as u32 + 2) * scale;
    let mut img = ImageBuffer::<Luma<u8>, Vec<u8>>::new(3 * w as u32, h as u32 + band);
    for (i, (panel, label)) in [(&lr_big, "LR"), (sr, "SR"), (baseline, "BICUBIC")].into_iter().enumerate() {
        let x0 = (i * w) as u32;
        for r in 0..h {
            for c in 0..w {
                img.put_pixel(x0 + c as u32, band + r as u32, Luma([to_gray8(panel.get(r, c))]));
            }
        }
        draw_label(&mut img, x0, label, scale);
    }
    let mut bytes = Vec::new();
    img.write_with_encoder(PngEncoder::new(Cursor::new(&mut bytes)))
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    write_atomic(path, &bytes)
}

/// Intensity window mapped onto the full 16-bit range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityWindow {
    pub lo: f64,
    pub hi: f64,
}

pub const WINDOW_FILE: &str = "window.json";

/// Writes every axial slice as a 16-bit grayscale PNG plus a
/// `window.json` sidecar recording the intensity window.
pub fn export_slice_pngs(vol: &CtVolume, dir: &Path, window: IntensityWindow) -> Result<Vec<PathBuf>> {
    if !(window.hi > window.lo) {
        return Err(Error::param(format!("empty intensity window [{}, {}]", window.lo, window.hi)));
    }
    let [nx, ny, nz] = vol.dims();
    let mut paths = Vec::with_capacity(nz);
    for z in 0..nz {
        let px: Vec<u16> = vol
            .slice_data(z)
            .iter()
            .map(|&v| {
                let t = ((v as f64 - window.lo) / (window.hi - window.lo)).clamp(0.0, 1.0);
                (t * u16::MAX as f64).round() as u16
            })
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(nx as u32, ny as u32, px).expect("buffer matches dimensions");
        let path = dir.join(format!("{}-{z:03}.png", vol.id));
        let mut bytes = Vec::new();
        img.write_with_encoder(PngEncoder::new(Cursor::new(&mut bytes)))
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        write_atomic(&path, &bytes)?;
        paths.push(path);
    }
    write_atomic(&dir.join(WINDOW_FILE), serde_json::to_string_pretty(&window)?.as_bytes())?;
    Ok(paths)
}
