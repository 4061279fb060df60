//! Mean F-beta over the threshold sweep and the weighted F-measure with
//! its Gaussian-blurred dependency and distance-decay terms.

use super::{require_binary, threshold_counts, PredictionMap};
use crate::error::{Error, Result};

/// beta^2 for the thresholded F-measure.
pub const F_BETA_SQ: f64 = 0.3;
const EPS: f64 = f64::EPSILON;

/// Returns `(mean, weighted)`.
///
/// The weighted variant is undefined (an error) when the gt has no
/// foreground.
pub fn f_measure(pred: &PredictionMap, gt: &PredictionMap) -> Result<(f64, f64)> {
    pred.check_dims(gt)?;
    require_binary(gt)?;
    Ok((mean_f(pred, gt), weighted_f(pred, gt)?))
}

fn mean_f(pred: &PredictionMap, gt: &PredictionMap) -> f64 {
    let n_fg: f64 = gt.values().iter().sum();
    let counts = threshold_counts(pred, gt);
    let mut sum = 0.0;
    for &(tp, fp) in &counts {
        let (tp, fp) = (tp as f64, fp as f64);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if n_fg > 0.0 { tp / n_fg } else { 0.0 };
        let denom = F_BETA_SQ * precision + recall;
        if denom > 0.0 {
            sum += (1.0 + F_BETA_SQ) * precision * recall / denom;
        }
    }
    sum / 256.0
}

/// 7x7 Gaussian (sigma 5), normalized to sum 1.
fn dependency_kernel() -> Vec<f64> {
    let sigma = 5.0;
    let mut k = Vec::with_capacity(49);
    for y in -3i64..=3 {
        for x in -3i64..=3 {
            k.push((-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// For every background pixel: squared distance to the nearest
/// foreground pixel(s) and all tied nearest indices. Ties are kept so
/// the error substitution can average over them, which keeps the measure
/// flip-invariant. Exhaustive search is fine at desk-scale extents.
fn nearest_foreground(gt: &PredictionMap) -> Vec<(f64, Vec<usize>)> {
    let (h, w) = (gt.height(), gt.width());
    let fg: Vec<(i64, i64)> = (0..h * w)
        .filter(|&i| gt.values()[i] == 1.0)
        .map(|i| ((i / w) as i64, (i % w) as i64))
        .collect();
    let mut out = vec![(0.0, Vec::new()); h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if gt.values()[i] == 1.0 {
                out[i] = (0.0, vec![i]);
                continue;
            }
            let mut best = i64::MAX;
            let mut ties = Vec::new();
            for &(fy, fx) in &fg {
                let d = (fy - y as i64).pow(2) + (fx - x as i64).pow(2);
                if d < best {
                    best = d;
                    ties.clear();
                }
                if d == best {
                    ties.push((fy as usize) * w + fx as usize);
                }
            }
            out[i] = (best as f64, ties);
        }
    }
    out
}

fn weighted_f(pred: &PredictionMap, gt: &PredictionMap) -> Result<f64> {
    let (h, w) = (pred.height(), pred.width());
    let n_fg: f64 = gt.values().iter().sum();
    if n_fg == 0.0 {
        return Err(Error::EmptyGroundTruth);
    }
    let gv = gt.values();
    let err: Vec<f64> = pred
        .values()
        .iter()
        .zip(gv)
        .map(|(p, g)| (p - g).abs())
        .collect();

    // Background pixels inherit the error of their nearest foreground
    // pixel before blurring, so the dependency term treats the object
    // boundary consistently.
    let nearest = nearest_foreground(gt);
    let mut err_t = err.clone();
    for i in 0..h * w {
        if gv[i] == 0.0 {
            let ties = &nearest[i].1;
            err_t[i] = ties.iter().map(|&j| err[j]).sum::<f64>() / ties.len() as f64;
        }
    }

    let kernel = dependency_kernel();
    let mut blurred = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in -3i64..=3 {
                let yy = y as i64 + ky;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for kx in -3i64..=3 {
                    let xx = x as i64 + kx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    acc += kernel[((ky + 3) * 7 + kx + 3) as usize]
                        * err_t[yy as usize * w + xx as usize];
                }
            }
            blurred[y * w + x] = acc;
        }
    }

    // Weighted error: blur only helps inside the object; background
    // errors decay with distance from the object.
    let decay = (0.5f64).ln() / 5.0;
    let mut tp_w = n_fg;
    let mut fp_w = 0.0;
    let mut fg_err = 0.0;
    for i in 0..h * w {
        let min_e = if gv[i] == 1.0 && blurred[i] < err[i] {
            blurred[i]
        } else {
            err[i]
        };
        if gv[i] == 1.0 {
            tp_w -= min_e;
            fg_err += min_e;
        } else {
            let b = 2.0 - (decay * nearest[i].0.sqrt()).exp();
            fp_w += min_e * b;
        }
    }
    let recall = 1.0 - fg_err / n_fg;
    let precision = tp_w / (EPS + tp_w + fp_w);
    Ok(2.0 * recall * precision / (EPS + recall + precision))
}
