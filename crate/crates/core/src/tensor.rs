//! Dense `f32` tensors in NCHW layout and the convolution kernels the
//! networks are built from.

use crate::error::{Error, Result};
use crate::par;
use crate::patch::ImagePatch;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Stacks single-channel patches into an `[N, 1, H, W]` tensor.
    pub fn from_patches(patches: &[&ImagePatch]) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero patches"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(patches.len() * h * w);
        for p in patches {
            if p.dims() != (h, w) {
                return Err(Error::shape("patches in a batch must share dimensions"));
            }
            data.extend(p.data().iter().map(|&v| v as f32));
        }
        Self::from_vec(&[patches.len(), 1, h, w], data)
    }

    pub fn from_patch(patch: &ImagePatch) -> Self {
        Self::from_patches(&[patch]).expect("single patch always stacks")
    }

    /// Splits an `[N, 1, H, W]` tensor into patches.
    pub fn to_patches(&self) -> Result<Vec<ImagePatch>> {
        let (n, c, h, w) = self.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("expected one channel, got {c}")));
        }
        self.data
            .chunks(h * w)
            .take(n)
            .map(|plane| ImagePatch::new(h, w, plane.iter().map(|&v| v as f64).collect()))
            .collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected NCHW tensor, got {:?}", self.shape))),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of a square-kernel 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            None
        } else {
            Some((padded - self.kernel) / self.stride + 1)
        }
    }
}

// Rows of the output / column matrices handled by one parallel task. Fixed
// so the work split, and with it the summation order, never depends on the
// thread count.
const ROW_CHUNK: usize = 64;

/// `c[m x n] (+)= a[m x k] * b[k x n]`, all row-major; `a` may be given
/// transposed (stored `k x m`) via `a_trans`, `b` likewise via `b_trans`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    par::for_each_chunk_mut(c, ROW_CHUNK * n, |chunk_idx, c_rows| {
        let row0 = chunk_idx * ROW_CHUNK;
        let rows = c_rows.len() / n;
        let a_off = row0 as isize * rsa;
        // SAFETY: the slices cover the strided ranges described by the
        // dimensions and strides passed here; `c_rows` is exclusive.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

fn im2col(
    plane: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let kk = g.kernel * g.kernel;
    par::for_each_chunk_mut(col, kk * oh * ow, |c, rows| {
        let src = &plane[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = &mut rows[(ki * g.kernel + kj) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    });
    debug_assert_eq!(col.len(), channels * kk * oh * ow);
}

fn col2im(col: &[f32], h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, plane: &mut [f32]) {
    let kk = g.kernel * g.kernel;
    par::for_each_chunk_mut(plane, h * w, |c, dst| {
        let rows = &col[c * kk * oh * ow..(c + 1) * kk * oh * ow];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = &rows[(ki * g.kernel + kj) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
}

fn conv_shapes(input: &Tensor, weight: &Tensor, g: ConvGeom) -> Result<[usize; 7]> {
    let (n, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != g.kernel || kw != g.kernel {
        return Err(Error::shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    let (oh, ow) = match (g.out_size(h), g.out_size(w)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "input {h}x{w} too small for kernel {} stride {} pad {}",
                g.kernel, g.stride, g.pad
            )))
        }
    };
    Ok([n, c, h, w, o, oh, ow])
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Result<Tensor> {
    let [n, c, h, w, o, oh, ow] = conv_shapes(input, weight, g)?;
    let ckk = c * g.kernel * g.kernel;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let mut col = vec![0.0f32; ckk * oh * ow];
    for i in 0..n {
        im2col(&input.data[i * c * h * w..(i + 1) * c * h * w], c, h, w, g, oh, ow, &mut col);
        let out_i = &mut out.data[i * o * oh * ow..(i + 1) * o * oh * ow];
        gemm(o, ckk, oh * ow, &weight.data, false, &col, false, out_i, false);
        if let Some(b) = bias {
            for (oc, plane) in out_i.chunks_mut(oh * ow).enumerate() {
                let bv = b.data[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, g: ConvGeom) -> Result<ConvGrads> {
    let [n, c, h, w, o, oh, ow] = conv_shapes(input, weight, g)?;
    let ckk = c * g.kernel * g.kernel;
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[o]);
    let mut col = vec![0.0f32; ckk * oh * ow];
    let mut gcol = vec![0.0f32; ckk * oh * ow];
    for i in 0..n {
        let go = &grad_out.data[i * o * oh * ow..(i + 1) * o * oh * ow];
        for (oc, plane) in go.chunks(oh * ow).enumerate() {
            gb.data[oc] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        im2col(&input.data[i * c * h * w..(i + 1) * c * h * w], c, h, w, g, oh, ow, &mut col);
        // dW[o x ckk] += dOut[o x p] * col^T[p x ckk]
        gemm(o, oh * ow, ckk, go, false, &col, true, &mut gw.data, true);
        // dCol[ckk x p] = W^T[ckk x o] * dOut[o x p]
        gemm(ckk, o, oh * ow, &weight.data, true, go, false, &mut gcol, false);
        col2im(&gcol, h, w, g, oh, ow, &mut gi.data[i * c * h * w..(i + 1) * c * h * w]);
    }
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

/// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (n, cr, h, w) = input.dims4()?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::shape(format!("{cr} channels cannot shuffle by {r}")));
    }
    let c = cr / (r * r);
    let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
    let (oh, ow) = (h * r, w * r);
    par::for_each_chunk_mut(&mut out.data, oh * ow, |plane_idx, dst| {
        let (b, ch) = (plane_idx / c, plane_idx % c);
        for i in 0..r {
            for j in 0..r {
                let src_c = ch * r * r + i * r + j;
                let src = &input.data[(b * cr + src_c) * h * w..][..h * w];
                for y in 0..h {
                    for x in 0..w {
                        dst[(y * r + i) * ow + x * r + j] = src[y * w + x];
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Adjoint (and inverse) of [`pixel_shuffle`].
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = input.dims4()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::shape(format!("{oh}x{ow} cannot unshuffle by {r}")));
    }
    let (h, w) = (oh / r, ow / r);
    let cr = c * r * r;
    let mut out = Tensor::zeros(&[n, cr, h, w]);
    par::for_each_chunk_mut(&mut out.data, h * w, |plane_idx, dst| {
        let (b, src_c) = (plane_idx / cr, plane_idx % cr);
        let (ch, i, j) = (src_c / (r * r), (src_c % (r * r)) / r, src_c % r);
        let src = &input.data[(b * c + ch) * oh * ow..][..oh * ow];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y * r + i) * ow + x * r + j];
            }
        }
    });
    Ok(out)
}

pub const INSTANCE_NORM_EPS: f32 = 1e-5;

/// Per-plane normalization to zero mean and unit variance. Returns the
/// normalized tensor and one inverse standard deviation per plane.
pub fn instance_norm(input: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let mut out = input.clone();
    let mut inv_std = vec![0.0f32; n * c];
    par::for_each_chunk_mut(&mut out.data, hw, |_, plane| {
        let (mean, var) = plane_moments(plane);
        let inv = 1.0 / (var + INSTANCE_NORM_EPS as f64).sqrt();
        plane.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
    });
    for (plane, s) in input.data.chunks(hw).zip(inv_std.iter_mut()) {
        let (_, var) = plane_moments(plane);
        *s = (1.0 / (var + INSTANCE_NORM_EPS as f64).sqrt()) as f32;
    }
    Ok((out, inv_std))
}

fn plane_moments(plane: &[f32]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Gradient of [`instance_norm`] given its output `normalized`.
pub fn instance_norm_backward(normalized: &Tensor, inv_std: &[f32], grad_out: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = normalized.dims4()?;
    let hw = h * w;
    let mut gi = grad_out.clone();
    par::for_each_chunk_mut(&mut gi.data, hw, |p, plane| {
        let xhat = &normalized.data[p * hw..(p + 1) * hw];
        let n = hw as f64;
        let mean_g = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mean_gx = plane.iter().zip(xhat).map(|(&g, &x)| g as f64 * x as f64).sum::<f64>() / n;
        let s = inv_std[p] as f64;
        for (g, &x) in plane.iter_mut().zip(xhat) {
            *g = (s * (*g as f64 - mean_g - x as f64 * mean_gx)) as f32;
        }
    });
    Ok(gi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeom) -> Tensor {
        let (n, c, h, w) = input.dims4().unwrap();
        let (o, _, k, _) = weight.dims4().unwrap();
        let oh = g.out_size(h).unwrap();
        let ow = g.out_size(w).unwrap();
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias.data[oc] as f64;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (x * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += input.data[((b * c + ic) * h + iy as usize) * w + ix as usize] as f64
                                            * weight.data[((oc * c + ic) * k + ki) * k + kj] as f64;
                                    }
                                }
                            }
                        }
                        out.data[((b * o + oc) * oh + y) * ow + x] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 23) as f32 - 11.0) * scale).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for g in [
            ConvGeom { kernel: 3, stride: 1, pad: 1 },
            ConvGeom { kernel: 4, stride: 2, pad: 1 },
            ConvGeom { kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = ramp(&[2, 3, 9, 10], 0.1);
            let wt = ramp(&[13, 3, g.kernel, g.kernel], 0.05);
            let b = ramp(&[13], 0.2);
            let fast = conv2d(&x, &wt, Some(&b), g).unwrap();
            let slow = naive_conv(&x, &wt, &b, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-4, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_small_input() {
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        let wt = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(conv2d(&x, &wt, None, ConvGeom { kernel: 4, stride: 2, pad: 1 }).is_err());
    }

    #[test]
    fn shuffle_roundtrip() {
        let x = ramp(&[2, 8, 3, 5], 1.0);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 6, 10]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
        // channel i*r+j lands at sub-pixel (i, j)
        assert_eq!(y.data()[1], x.data()[15]);
    }

    #[test]
    fn instance_norm_moments() {
        let x = ramp(&[1, 2, 4, 4], 0.3);
        let (y, _) = instance_norm(&x).unwrap();
        for plane in y.data().chunks(16) {
            let (m, v) = plane_moments(plane);
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
