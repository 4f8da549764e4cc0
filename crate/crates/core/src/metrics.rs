//! Evaluation metrics on unit-range images: peak signal-to-noise ratio
//! and structural similarity. Both accumulate in f64 so results are
//! stable across platforms and input orderings.

use serde::{Deserialize, Serialize};

use crate::decomp::ImageTensor;
use crate::error::{Error, Result};

/// PSNR reported for a pixel-perfect match (the ratio itself is infinite).
pub const PSNR_CAP_DB: f64 = 99.0;

/// Side length of the structural-similarity window.
const SSIM_WINDOW: usize = 11;
/// Standard deviation of the Gaussian tap weights inside the window.
const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers keeping the luminance / contrast ratios finite on flat
/// regions, for a unit dynamic range.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn check_same_shape(a: &ImageTensor, b: &ImageTensor, context: &str) -> Result<()> {
    if a.shape() != b.shape() {
        let (ec, eh, ew) = a.shape();
        let (ac, ah, aw) = b.shape();
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: vec![ec, eh, ew],
            actual: vec![ac, ah, aw],
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b, "psnr")?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized Gaussian taps for one axis of the window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Gaussian-filters `src` (H×W, row-major) with the separable window,
/// valid mode: the result is (H−10)×(W−10).
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - (SSIM_WINDOW - 1);
    let ho = h - (SSIM_WINDOW - 1);
    let mut horiz = vec![0.0; h * wo];
    for row in 0..h {
        for col in 0..wo {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * src[row * w + col + k];
            }
            horiz[row * wo + col] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for row in 0..ho {
        for col in 0..wo {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * horiz[(row + k) * wo + col];
            }
            out[row * wo + col] = acc;
        }
    }
    out
}

/// Mean structural similarity over an 11×11 Gaussian window, computed per
/// channel and averaged. Identical inputs score exactly 1.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Structural(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps();
    let mut channel_sum = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a
            .data()
            .index_axis(ndarray::Axis(0), ch)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = b
            .data()
            .index_axis(ndarray::Axis(0), ch)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();

        let mu_x = filter_valid(&x, h, w, &taps);
        let mu_y = filter_valid(&y, h, w, &taps);
        let e_xx = filter_valid(&xx, h, w, &taps);
        let e_yy = filter_valid(&yy, h, w, &taps);
        let e_xy = filter_valid(&xy, h, w, &taps);

        let mut cell_sum = 0.0;
        for i in 0..mu_x.len() {
            let var_x = e_xx[i] - mu_x[i] * mu_x[i];
            let var_y = e_yy[i] - mu_y[i] * mu_y[i];
            let cov = e_xy[i] - mu_x[i] * mu_y[i];
            let num = (2.0 * mu_x[i] * mu_y[i] + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + SSIM_C1) * (var_x + var_y + SSIM_C2);
            cell_sum += num / den;
        }
        channel_sum += cell_sum / mu_x.len() as f64;
    }
    Ok(channel_sum / c as f64)
}

/// Aggregate quality of a batch of (output, reference) pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Evaluates outputs against references pairwise and averages.
pub fn evaluate_pairs(outputs: &[ImageTensor], references: &[ImageTensor]) -> Result<MetricReport> {
    if outputs.len() != references.len() {
        return Err(Error::Structural(format!(
            "evaluate_pairs: {} outputs vs {} references",
            outputs.len(),
            references.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Structural("evaluate_pairs: no pairs".into()));
    }
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (out, reference) in outputs.iter().zip(references) {
        psnr_sum += psnr(out, reference)?;
        ssim_sum += ssim(out, reference)?;
    }
    let n = outputs.len() as f64;
    Ok(MetricReport {
        count: outputs.len(),
        mean_psnr: psnr_sum / n,
        mean_ssim: ssim_sum / n,
    })
}
