//! Structural similarity with the standard 11x11 Gaussian window.

use super::PredictionMap;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers on dynamic range 1: (0.01)^2 and (0.03)^2.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// The normalized 11x11 Gaussian window (sigma 1.5), row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - r;
            let dx = x as f64 - r;
            w.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean local SSIM over all valid (unpadded) window positions.
/// Result lies in `[-1, 1]`; symmetric in its arguments.
pub fn ssim(a: &PredictionMap, b: &PredictionMap) -> Result<f64> {
    a.check_dims(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs extents >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let av = a.values();
    let bv = b.values();
    let mut total = 0.0;
    let positions = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW {
                let row = (oy + ky) * w + ox;
                let wrow = &win[ky * SSIM_WINDOW..(ky + 1) * SSIM_WINDOW];
                for (kx, &g) in wrow.iter().enumerate() {
                    let x = av[row + kx];
                    let y = bv[row + kx];
                    mu_a += g * x;
                    mu_b += g * y;
                    aa += g * x * x;
                    bb += g * y * y;
                    ab += g * x * y;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
        }
    }
    Ok(total / positions as f64)
}

/// SSIM of two constant patches with the given values — the closed form
/// the windowed mean collapses to when both inputs are flat.
pub fn constant_patch_ssim(a: f64, b: f64) -> f64 {
    (2.0 * a * b + SSIM_C1) * SSIM_C2 / ((a * a + b * b + SSIM_C1) * SSIM_C2)
}
