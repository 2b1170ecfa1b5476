//! Whole-slice and whole-volume super-resolution by tiling.
//!
//! A slice is reflect-padded so a regular grid of tiles covers it, each tile
//! is super-resolved on its own, and overlapping outputs are cross-faded.
//! Per-axis blend weights are multiples of 2^-12 that sum to exactly one at
//! every output pixel, so blending equal values reproduces them bit for bit.

use serde::{Deserialize, Serialize};

use crate::data::{CtVolume, Modality, Spacing};
use crate::error::{Error, Result};
use crate::loss::{nn_upsample, SCALE_FACTOR};
use crate::nn::SuperResolver;
use crate::par;
use crate::patch::ImagePatch;

pub const DEFAULT_TILE_SIZE: usize = 64;
pub const DEFAULT_OVERLAP: usize = 8;
pub const MIN_TILE_SIZE: usize = 8;

const WEIGHT_QUANTUM: f64 = 4096.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Tiles in coordinates of the padded input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub tiles: Vec<Tile>,
    pub input_shape: (usize, usize),
    pub tile_size: usize,
    pub overlap: usize,
    pub padding: Padding,
}

/// Start offsets, tile length and padding `(before, after)` along one axis.
fn plan_axis(len: usize, tile: usize, overlap: usize) -> (Vec<usize>, usize, (usize, usize)) {
    if len <= tile {
        return (vec![0], len, (0, 0));
    }
    let stride = tile - overlap;
    let n = (len - overlap).div_ceil(stride);
    let padded = n * stride + overlap;
    let pad = padded - len;
    ((0..n).map(|i| i * stride).collect(), tile, (pad / 2, pad - pad / 2))
}

/// Plans tiles of `tile_size` overlapping by `overlap` pixels over a
/// `(height, width)` slice. Axes no longer than one tile get a single tile
/// spanning them.
pub fn plan_tiles(shape: (usize, usize), tile_size: usize, overlap: usize) -> Result<TilePlan> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot tile an empty {h}x{w} slice")));
    }
    if tile_size < MIN_TILE_SIZE {
        return Err(Error::param(format!("tile size {tile_size} is below {MIN_TILE_SIZE}")));
    }
    if overlap >= tile_size {
        return Err(Error::param(format!(
            "overlap {overlap} must be smaller than the tile size {tile_size}"
        )));
    }
    let (rows, th, (top, bottom)) = plan_axis(h, tile_size, overlap);
    let (cols, tw, (left, right)) = plan_axis(w, tile_size, overlap);
    let tiles = rows
        .iter()
        .flat_map(|&row| {
            cols.iter().map(move |&col| Tile {
                row,
                col,
                height: th,
                width: tw,
            })
        })
        .collect();
    Ok(TilePlan {
        tiles,
        input_shape: shape,
        tile_size,
        overlap,
        padding: Padding {
            top,
            bottom,
            left,
            right,
        },
    })
}

impl TilePlan {
    pub fn padded_shape(&self) -> (usize, usize) {
        let p = self.padding;
        (
            self.input_shape.0 + p.top + p.bottom,
            self.input_shape.1 + p.left + p.right,
        )
    }

    fn axis_starts(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows: Vec<usize> = self.tiles.iter().map(|t| t.row).collect();
        let mut cols: Vec<usize> = self.tiles.iter().map(|t| t.col).collect();
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        (rows, cols)
    }
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Mirrors the border without repeating the edge pixel.
pub fn reflect_pad(img: &ImagePatch, p: Padding) -> ImagePatch {
    let (h, w) = img.dims();
    ImagePatch::from_fn(h + p.top + p.bottom, w + p.left + p.right, |r, c| {
        img.get(
            reflect(r as isize - p.top as isize, h),
            reflect(c as isize - p.left as isize, w),
        )
    })
}

/// Blend weights of every tile along one output axis of length `len`,
/// given tile starts and the tile length (all in output pixels).
fn axis_weights(len: usize, starts: &[usize], tile: usize) -> Vec<Vec<f64>> {
    let mut weights = vec![vec![0.0; tile]; starts.len()];
    for p in 0..len {
        let covering: Vec<usize> = (0..starts.len())
            .filter(|&t| p >= starts[t] && p < starts[t] + tile)
            .collect();
        let raw: Vec<f64> = covering
            .iter()
            .map(|&t| {
                let k = p - starts[t];
                (k.min(tile - 1 - k) + 1) as f64
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let mut assigned = 0.0;
        for (i, &t) in covering.iter().enumerate() {
            let w = if i + 1 == covering.len() {
                1.0 - assigned
            } else {
                (raw[i] / total * WEIGHT_QUANTUM).floor() / WEIGHT_QUANTUM
            };
            assigned += w;
            weights[t][p - starts[t]] = w;
        }
    }
    weights
}

struct Blend {
    rows: Vec<usize>,
    cols: Vec<usize>,
    wy: Vec<Vec<f64>>,
    wx: Vec<Vec<f64>>,
}

fn blend_for(plan: &TilePlan) -> Blend {
    let s = SCALE_FACTOR;
    let (ph, pw) = plan.padded_shape();
    let (rows, cols) = plan.axis_starts();
    let th = plan.tiles[0].height * s;
    let tw = plan.tiles[0].width * s;
    let up = |v: &[usize]| v.iter().map(|x| x * s).collect::<Vec<_>>();
    Blend {
        wy: axis_weights(ph * s, &up(&rows), th),
        wx: axis_weights(pw * s, &up(&cols), tw),
        rows,
        cols,
    }
}

impl Blend {
    fn of(&self, tile: &Tile) -> (&[f64], &[f64]) {
        let i = self.rows.binary_search(&tile.row).expect("row of a planned tile");
        let j = self.cols.binary_search(&tile.col).expect("column of a planned tile");
        (&self.wy[i], &self.wx[j])
    }
}

/// Sum of blend weights at every pixel of the padded output.
pub fn weight_map(plan: &TilePlan) -> ImagePatch {
    let s = SCALE_FACTOR;
    let (ph, pw) = plan.padded_shape();
    let blend = blend_for(plan);
    let mut acc = ImagePatch::filled(ph * s, pw * s, 0.0);
    for tile in &plan.tiles {
        let (wy, wx) = blend.of(tile);
        for (r, &a) in wy.iter().enumerate() {
            for (c, &b) in wx.iter().enumerate() {
                let (y, x) = (tile.row * s + r, tile.col * s + c);
                acc.set(y, x, acc.get(y, x) + a * b);
            }
        }
    }
    acc
}

/// Super-resolves one slice tile by tile and crops the padding away.
pub fn super_resolve_slice(g1: &dyn SuperResolver, slice: &ImagePatch, plan: &TilePlan) -> Result<ImagePatch> {
    if slice.dims() != plan.input_shape {
        return Err(Error::shape(format!(
            "slice is {:?} but the tile plan expects {:?}",
            slice.dims(),
            plan.input_shape
        )));
    }
    let s = SCALE_FACTOR;
    let padded = reflect_pad(slice, plan.padding);
    let outputs = par::try_map(&plan.tiles, |t| {
        let out = g1.super_resolve(&padded.crop(t.row, t.col, t.height, t.width)?)?;
        if out.dims() != (t.height * s, t.width * s) {
            return Err(Error::shape(format!(
                "generator turned a {}x{} tile into {:?}, expected {}x",
                t.height,
                t.width,
                out.dims(),
                s
            )));
        }
        Ok(out)
    })?;

    let (ph, pw) = plan.padded_shape();
    let blend = blend_for(plan);
    let mut acc = vec![0.0f64; ph * s * pw * s];
    let mut weight = vec![0.0f64; ph * s * pw * s];
    let stride = pw * s;
    for (tile, out) in plan.tiles.iter().zip(&outputs) {
        let (wy, wx) = blend.of(tile);
        let ow = out.width();
        for (r, &a) in wy.iter().enumerate() {
            let base = (tile.row * s + r) * stride + tile.col * s;
            let src = &out.data()[r * ow..(r + 1) * ow];
            for (c, (&b, &v)) in wx.iter().zip(src).enumerate() {
                let w = a * b;
                acc[base + c] += w * v;
                weight[base + c] += w;
            }
        }
    }
    let full = ImagePatch::new(
        ph * s,
        pw * s,
        acc.iter().zip(&weight).map(|(a, w)| a / w).collect(),
    )?;
    let (h, w) = plan.input_shape;
    full.crop(plan.padding.top * s, plan.padding.left * s, h * s, w * s)
}

/// Super-resolves every axial slice. The result has in-plane spacing
/// divided by the scale factor and is tagged as synthetic micro-CT.
pub fn super_resolve_volume(
    g1: &dyn SuperResolver,
    vol: &CtVolume,
    tile_size: usize,
    overlap: usize,
) -> Result<CtVolume> {
    let [nx, ny, nz] = vol.dims();
    let plan = plan_tiles((ny, nx), tile_size, overlap)?;
    let slices: Vec<usize> = (0..nz).collect();
    let out = par::try_map(&slices, |&z| super_resolve_slice(g1, &vol.slice(z), &plan))?;
    let f = SCALE_FACTOR as f64;
    let spacing = Spacing {
        x: vol.spacing.x / f,
        y: vol.spacing.y / f,
        ..vol.spacing
    };
    CtVolume::from_slices(format!("{}-sr", vol.id), Modality::SyntheticMicro, spacing, &out)
}

/// Nearest-neighbour 8x upsampler standing in for a trained generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct NearestUpsampler;

impl SuperResolver for NearestUpsampler {
    fn super_resolve(&self, lr: &ImagePatch) -> Result<ImagePatch> {
        nn_upsample(lr, SCALE_FACTOR)
    }
}
