//! Image comparison metrics: MSE, PSNR and SSIM.
//!
//! Metrics always operate on pixel values in [0,1], regardless of the
//! models' internal [−1,1] convention; [`to_unit_range`] /
//! [`to_model_range`] are the single conversion boundary.

use ndarray::{Array2, ArrayD};

use crate::error::{Error, Result};

/// SSIM window side length (uniform window, stride 1).
const SSIM_WINDOW: usize = 8;
/// SSIM stabilizers for L=1: C1=(0.01·L)², C2=(0.03·L)².
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// Maps model-space values in [−1,1] to metric space [0,1], clamping.
pub fn to_unit_range(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Maps [0,1] pixel values to the models' [−1,1] convention.
pub fn to_model_range(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| 2.0 * v - 1.0)
}

/// Per-pair metric values. `psnr` is `+∞` exactly when `mse` is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn check_pair(a: &ArrayD<f64>, b: &ArrayD<f64>, max_value: f64) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "metrics: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for v in a.iter().chain(b.iter()) {
        if !(*v >= 0.0 && *v <= max_value) {
            return Err(Error::invalid(format!(
                "metrics: pixel value {v} outside [0, {max_value}]"
            )));
        }
    }
    Ok(())
}

/// Mean squared error over all channels and pixels, inputs in [0,1].
pub fn mse(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    check_pair(a, b, 1.0)?;
    let n = a.len() as f64;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / n)
}

/// Peak signal-to-noise ratio in dB: 10·log10(max² / mse), `+∞` at mse=0.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(Error::invalid("psnr: max_value must be positive"));
    }
    check_pair(a, b, max_value)?;
    let n = a.len() as f64;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    let m = acc / n;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / m).log10())
}

fn grayscale(a: &ArrayD<f64>) -> Result<Array2<f64>> {
    if a.ndim() != 3 {
        return Err(Error::invalid(format!(
            "ssim: expected [C,H,W] image, got shape {:?}",
            a.shape()
        )));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += a[[ch, i, j]];
            }
            out[[i, j]] = acc / c as f64;
        }
    }
    Ok(out)
}

/// Summed-area table with a zero top row and left column.
fn integral(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut s = Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            s[[i + 1, j + 1]] = x[[i, j]] + s[[i, j + 1]] + s[[i + 1, j]] - s[[i, j]];
        }
    }
    s
}

fn window_sum(s: &Array2<f64>, i: usize, j: usize, k: usize) -> f64 {
    s[[i + k, j + k]] - s[[i, j + k]] - s[[i + k, j]] + s[[i, j]]
}

/// Mean structural similarity over all 8×8 windows at stride 1, after
/// grayscale conversion by channel mean. Inputs are `[C,H,W]` in [0,1]
/// with H, W ≥ 8.
pub fn ssim(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    check_pair(a, b, 1.0)?;
    let ga = grayscale(a)?;
    let gb = grayscale(b)?;
    let (h, w) = ga.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim: image {h}x{w} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let sa = integral(&ga);
    let sb = integral(&gb);
    let saa = integral(&ga.mapv(|v| v * v));
    let sbb = integral(&gb.mapv(|v| v * v));
    let sab = integral(&(&ga * &gb));

    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=(h - k) {
        for j in 0..=(w - k) {
            let mu_a = window_sum(&sa, i, j, k) / n;
            let mu_b = window_sum(&sb, i, j, k) / n;
            let var_a = (window_sum(&saa, i, j, k) / n - mu_a * mu_a).max(0.0);
            let var_b = (window_sum(&sbb, i, j, k) / n - mu_b * mu_b).max(0.0);
            let cov = window_sum(&sab, i, j, k) / n - mu_a * mu_b;
            total += ssim_window(mu_a, mu_b, var_a, var_b, cov);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn ssim_window(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// All three metrics for one image pair.
pub fn compare(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<PairMetrics> {
    Ok(PairMetrics {
        mse: mse(a, b)?,
        psnr: psnr(a, b, 1.0)?,
        ssim: ssim(a, b)?,
    })
}

/// Arithmetic mean of per-pair metrics; `+∞` PSNR propagates.
pub fn aggregate(pairs: &[PairMetrics]) -> PairMetrics {
    assert!(!pairs.is_empty(), "aggregate of empty metric list");
    let n = pairs.len() as f64;
    PairMetrics {
        mse: pairs.iter().map(|p| p.mse).sum::<f64>() / n,
        psnr: pairs.iter().map(|p| p.psnr).sum::<f64>() / n,
        ssim: pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
    }
}
