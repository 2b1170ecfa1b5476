//! Multi-modality super-resolution loss.
//!
//! Every term compares a real image with the generated image of the other
//! domain after rescaling it back to the real image's grid:
//!
//! * `s_x`: SSIM term between a clinical patch `x` and the block-averaged SR
//!   output `f(x_sr)`.
//! * `s_y`: SSIM term between a micro patch `y` and the nearest-neighbour
//!   upsampled fake clinical patch `g(y_lr)`.
//! * `d_term`: MSE between `x` and `f(x_sr)`.
//! * `u_term`: MSE between `y` and `g(y_lr)`.
//!
//! All functions work in `f64` and have closed-form gradients so they can be
//! spliced into the training graph as a single node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::ImagePatch;

/// Resolution ratio between the two domains.
pub const SCALE_FACTOR: usize = 8;

/// Which mean term the SSIM ratio uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimForm {
    /// `(mu_x * mu_y + C1)` in the numerator, as used for training.
    #[default]
    AsPrinted,
    /// The usual `(2 * mu_x * mu_y + C1)`.
    Standard,
}

impl SsimForm {
    fn mean_coeff(self) -> f64 {
        match self {
            SsimForm::AsPrinted => 1.0,
            SsimForm::Standard => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    /// Normalizing constant dividing the whole term.
    pub n: f64,
    pub c1: f64,
    pub c2: f64,
    #[serde(default)]
    pub form: SsimForm,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            n: 1.0,
            c1: 0.02,
            c2: 0.06,
            form: SsimForm::AsPrinted,
        }
    }
}

impl SsimParams {
    pub fn standard() -> Self {
        Self {
            form: SsimForm::Standard,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::param("SSIM constants C1 and C2 must be positive"));
        }
        if !(self.n > 0.0) || !self.n.is_finite() {
            return Err(Error::param("SSIM normalizer N must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Adversarial terms of the base translation objective.
    pub w_adv: f64,
    /// Cycle-consistency terms of the base objective.
    pub w_cyc: f64,
    /// Identity terms of the base objective; off by default.
    pub w_idt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            w_adv: 1.0,
            w_cyc: 10.0,
            w_idt: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.w_adv,
            self.w_cyc,
            self.w_idt,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::param("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Weights with every multi-modality term disabled.
    pub fn without_mmsr(self) -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            ..self
        }
    }
}

/// Per-term values of the full objective. The four MMSR fields hold the
/// unweighted term values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub orig: f64,
    pub s_x: f64,
    pub s_y: f64,
    pub d_term: f64,
    pub u_term: f64,
}

impl LossBreakdown {
    pub fn from_terms(orig: f64, s_x: f64, s_y: f64, d_term: f64, u_term: f64, w: &LossWeights) -> Self {
        let mut b = Self {
            total: 0.0,
            orig,
            s_x,
            s_y,
            d_term,
            u_term,
        };
        b.total = b.weighted_sum(w);
        b
    }

    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.orig
            + w.lambda1 * self.s_x
            + w.lambda2 * self.s_y
            + w.lambda3 * self.d_term
            + w.lambda4 * self.u_term
    }

    /// `total` agrees with the weighted sum of its parts to `rel_tol`.
    pub fn is_consistent(&self, w: &LossWeights, rel_tol: f64) -> bool {
        let recomputed = self.weighted_sum(w);
        (self.total - recomputed).abs() <= rel_tol * recomputed.abs().max(self.total.abs()).max(1e-12)
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("orig", self.orig),
            ("s_x", self.s_x),
            ("s_y", self.s_y),
            ("d_term", self.d_term),
            ("u_term", self.u_term),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// First and second moments of a patch pair. Variances and covariance use
/// the population convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
}

pub fn patch_stats(x: &ImagePatch, y: &ImagePatch) -> Result<PatchStats> {
    x.ensure_same_shape(y, "patch_stats")?;
    let n = x.len() as f64;
    let mu_x = x.data().iter().sum::<f64>() / n;
    let mu_y = y.data().iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut cov_xy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (da, db) = (a - mu_x, b - mu_y);
        var_x += da * da;
        var_y += db * db;
        cov_xy += da * db;
    }
    Ok(PatchStats {
        mu_x,
        mu_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov_xy: cov_xy / n,
    })
}

struct SsimParts {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl SsimParts {
    fn new(s: &PatchStats, p: &SsimParams) -> Self {
        Self {
            a: p.form.mean_coeff() * s.mu_x * s.mu_y + p.c1,
            b: 2.0 * s.cov_xy + p.c2,
            c: s.mu_x * s.mu_x + s.mu_y * s.mu_y + p.c1,
            d: s.var_x + s.var_y + p.c2,
        }
    }

    fn ratio(&self) -> f64 {
        (self.a * self.b) / (self.c * self.d)
    }
}

/// The global (single-window) similarity ratio.
pub fn ssim_index(x: &ImagePatch, y: &ImagePatch, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    let s = patch_stats(x, y)?;
    Ok(SsimParts::new(&s, p).ratio())
}

pub fn ssim_loss(x: &ImagePatch, y: &ImagePatch, p: &SsimParams) -> Result<f64> {
    Ok((1.0 - ssim_index(x, y, p)?) / p.n)
}

/// SSIM loss and its gradient with respect to every pixel of `x` and `y`.
pub fn ssim_loss_grad(
    x: &ImagePatch,
    y: &ImagePatch,
    p: &SsimParams,
) -> Result<(f64, ImagePatch, ImagePatch)> {
    p.validate()?;
    let s = patch_stats(x, y)?;
    let parts = SsimParts::new(&s, p);
    let ratio = parts.ratio();
    let n = x.len() as f64;
    let k = p.form.mean_coeff();
    let cd = parts.c * parts.d;

    // d(ratio)/dv = (a' b + a b') / (c d) - ratio (c' d + c d') / (c d)
    let pixel_grad = |mu_self: f64, mu_other: f64, v_self: f64, v_other: f64| {
        let da = k * mu_other / n;
        let db = 2.0 * (v_other - mu_other) / n;
        let dc = 2.0 * mu_self / n;
        let dd = 2.0 * (v_self - mu_self) / n;
        let dratio = (da * parts.b + parts.a * db) / cd - ratio * (dc * parts.d + parts.c * dd) / cd;
        -dratio / p.n
    };

    let mut gx = Vec::with_capacity(x.len());
    let mut gy = Vec::with_capacity(y.len());
    for (&xv, &yv) in x.data().iter().zip(y.data()) {
        gx.push(pixel_grad(s.mu_x, s.mu_y, xv, yv));
        gy.push(pixel_grad(s.mu_y, s.mu_x, yv, xv));
    }
    let (h, w) = x.dims();
    Ok((
        (1.0 - ratio) / p.n,
        ImagePatch::new(h, w, gx)?,
        ImagePatch::new(h, w, gy)?,
    ))
}

fn check_factor(factor: usize) -> Result<()> {
    if factor < 1 {
        return Err(Error::param("scale factor must be at least 1"));
    }
    Ok(())
}

/// Nearest-neighbour upsampling: every pixel becomes a `factor x factor` block.
pub fn nn_upsample(lr: &ImagePatch, factor: usize) -> Result<ImagePatch> {
    check_factor(factor)?;
    Ok(ImagePatch::from_fn(lr.height() * factor, lr.width() * factor, |r, c| {
        lr.get(r / factor, c / factor)
    }))
}

/// Adjoint of [`nn_upsample`]: sums each `factor x factor` block.
pub fn nn_upsample_adjoint(grad_hr: &ImagePatch, factor: usize) -> Result<ImagePatch> {
    block_reduce(grad_hr, factor, 1.0)
}

/// Average pooling over non-overlapping `factor x factor` blocks.
pub fn avg_downsample(hr: &ImagePatch, factor: usize) -> Result<ImagePatch> {
    block_reduce(hr, factor, 1.0 / (factor * factor) as f64)
}

/// Adjoint of [`avg_downsample`]: spreads each value evenly over its block.
pub fn avg_downsample_adjoint(grad_lr: &ImagePatch, factor: usize) -> Result<ImagePatch> {
    check_factor(factor)?;
    let scale = 1.0 / (factor * factor) as f64;
    Ok(ImagePatch::from_fn(grad_lr.height() * factor, grad_lr.width() * factor, |r, c| {
        grad_lr.get(r / factor, c / factor) * scale
    }))
}

/// Pairwise sum, so a block of `2^k` equal values sums without rounding.
fn pairwise_sum(v: &mut [f64]) -> f64 {
    let mut n = v.len();
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            v[i] = v[2 * i] + v[2 * i + 1];
        }
        if n % 2 == 1 {
            v[half] = v[n - 1];
        }
        n = n.div_ceil(2);
    }
    v.first().copied().unwrap_or(0.0)
}

fn block_reduce(hr: &ImagePatch, factor: usize, scale: f64) -> Result<ImagePatch> {
    check_factor(factor)?;
    let (h, w) = hr.dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut block = vec![0.0; factor * factor];
    let mut out = Vec::with_capacity(oh * ow);
    for br in 0..oh {
        for bc in 0..ow {
            for r in 0..factor {
                let src = &hr.data()[(br * factor + r) * w + bc * factor..][..factor];
                block[r * factor..(r + 1) * factor].copy_from_slice(src);
            }
            out.push(pairwise_sum(&mut block) * scale);
        }
    }
    ImagePatch::new(oh, ow, out)
}

pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `a` (the gradient for `b` is its negation).
fn mse_grad_a(a: &ImagePatch, b: &ImagePatch) -> Result<ImagePatch> {
    a.ensure_same_shape(b, "mse")?;
    let n = a.len() as f64;
    let (h, w) = a.dims();
    ImagePatch::new(
        h,
        w,
        a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * (x - y) / n).collect(),
    )
}

fn check_scaled(lr: &ImagePatch, hr: &ImagePatch, what: &str) -> Result<()> {
    if hr.height() != lr.height() * SCALE_FACTOR || hr.width() != lr.width() * SCALE_FACTOR {
        return Err(Error::shape(format!(
            "{what}: high-resolution {}x{} is not {SCALE_FACTOR}x low-resolution {}x{}",
            hr.height(),
            hr.width(),
            lr.height(),
            lr.width()
        )));
    }
    Ok(())
}

/// Upsample loss: MSE between a micro patch and its upsampled fake clinical image.
pub fn upsample_loss(y: &ImagePatch, y_lr: &ImagePatch) -> Result<f64> {
    check_scaled(y_lr, y, "upsample_loss")?;
    mse(y, &nn_upsample(y_lr, SCALE_FACTOR)?)
}

/// Downsample loss: MSE between a clinical patch and its block-averaged SR image.
pub fn downsample_loss(x: &ImagePatch, x_sr: &ImagePatch) -> Result<f64> {
    check_scaled(x, x_sr, "downsample_loss")?;
    mse(x, &avg_downsample(x_sr, SCALE_FACTOR)?)
}

/// Full objective given the value of the base translation loss.
pub fn mmsr_total(
    orig: f64,
    x: &ImagePatch,
    x_sr: &ImagePatch,
    y: &ImagePatch,
    y_lr: &ImagePatch,
    w: &LossWeights,
    p: &SsimParams,
) -> Result<LossBreakdown> {
    check_scaled(x, x_sr, "mmsr x/x_sr")?;
    check_scaled(y_lr, y, "mmsr y/y_lr")?;
    let x_down = avg_downsample(x_sr, SCALE_FACTOR)?;
    let y_up = nn_upsample(y_lr, SCALE_FACTOR)?;
    Ok(LossBreakdown::from_terms(
        orig,
        ssim_loss(x, &x_down, p)?,
        ssim_loss(y, &y_up, p)?,
        mse(x, &x_down)?,
        mse(y, &y_up)?,
        w,
    ))
}

/// Gradients of the weighted MMSR terms (`total - orig`) for each input.
#[derive(Debug, Clone)]
pub struct MmsrGradients {
    pub breakdown: LossBreakdown,
    pub x: ImagePatch,
    pub x_sr: ImagePatch,
    pub y: ImagePatch,
    pub y_lr: ImagePatch,
}

pub fn mmsr_total_grad(
    orig: f64,
    x: &ImagePatch,
    x_sr: &ImagePatch,
    y: &ImagePatch,
    y_lr: &ImagePatch,
    w: &LossWeights,
    p: &SsimParams,
) -> Result<MmsrGradients> {
    check_scaled(x, x_sr, "mmsr x/x_sr")?;
    check_scaled(y_lr, y, "mmsr y/y_lr")?;
    let x_down = avg_downsample(x_sr, SCALE_FACTOR)?;
    let y_up = nn_upsample(y_lr, SCALE_FACTOR)?;

    let (s_x, gs_x, gs_xdown) = ssim_loss_grad(x, &x_down, p)?;
    let (s_y, gs_y, gs_yup) = ssim_loss_grad(y, &y_up, p)?;
    let d_term = mse(x, &x_down)?;
    let u_term = mse(y, &y_up)?;
    let gd_x = mse_grad_a(x, &x_down)?;
    let gu_y = mse_grad_a(y, &y_up)?;

    let combine = |a: &ImagePatch, wa: f64, b: &ImagePatch, wb: f64| {
        let data = a.data().iter().zip(b.data()).map(|(u, v)| wa * u + wb * v).collect();
        ImagePatch::new(a.height(), a.width(), data)
    };

    let grad_x = combine(&gs_x, w.lambda1, &gd_x, w.lambda3)?;
    let grad_x_down = combine(&gs_xdown, w.lambda1, &gd_x, -w.lambda3)?;
    let grad_y = combine(&gs_y, w.lambda2, &gu_y, w.lambda4)?;
    let grad_y_up = combine(&gs_yup, w.lambda2, &gu_y, -w.lambda4)?;

    Ok(MmsrGradients {
        breakdown: LossBreakdown::from_terms(orig, s_x, s_y, d_term, u_term, w),
        x: grad_x,
        x_sr: avg_downsample_adjoint(&grad_x_down, SCALE_FACTOR)?,
        y: grad_y,
        y_lr: nn_upsample_adjoint(&grad_y_up, SCALE_FACTOR)?,
    })
}
