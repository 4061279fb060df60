//! Structure measure: object-aware and region-aware similarity of a soft
//! prediction against a binary mask.

use super::{require_binary, PredictionMap};
use crate::error::Result;

const EPS: f64 = f64::EPSILON;

/// `alpha * S_object + (1 - alpha) * S_region`, clamped at 0.
///
/// Degenerate masks follow the reference convention: all-background gt
/// scores `1 - mean(pred)`, all-foreground gt scores `mean(pred)`.
pub fn s_measure(pred: &PredictionMap, gt: &PredictionMap, alpha: f64) -> Result<f64> {
    pred.check_dims(gt)?;
    require_binary(gt)?;
    let mu = gt.mean();
    if mu == 0.0 {
        return Ok(1.0 - pred.mean());
    }
    if mu == 1.0 {
        return Ok(pred.mean());
    }
    let q = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt);
    Ok(q.max(0.0))
}

/// Mean and sample standard deviation of `pred` over pixels where the
/// mask predicate holds.
fn masked_stats(pred: &PredictionMap, gt: &PredictionMap, fg: bool) -> (f64, f64, usize) {
    let want = if fg { 1.0 } else { 0.0 };
    let mut n = 0usize;
    let mut sum = 0.0;
    for (p, g) in pred.values().iter().zip(gt.values()) {
        if *g == want {
            n += 1;
            sum += p;
        }
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for (p, g) in pred.values().iter().zip(gt.values()) {
        if *g == want {
            ss += (p - mean) * (p - mean);
        }
    }
    let std = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
    (mean, std, n)
}

fn object_score(mean: f64, std: f64) -> f64 {
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn s_object(pred: &PredictionMap, gt: &PredictionMap) -> f64 {
    let (fg_mean, fg_std, _) = masked_stats(pred, gt, true);
    // Background similarity is scored on the complement prediction.
    let inv = PredictionMap::new(
        pred.height(),
        pred.width(),
        pred.values().iter().map(|v| 1.0 - v).collect(),
    )
    .expect("complement stays in [0,1]");
    let (bg_mean, bg_std, _) = masked_stats(&inv, gt, false);
    let mu = gt.mean();
    mu * object_score(fg_mean, fg_std) + (1.0 - mu) * object_score(bg_mean, bg_std)
}

/// Foreground centroid in 1-based coordinates. The cut is the floor of
/// the weighted mean rather than the nearest integer: a nearest-integer
/// cut keeps the centroid column on the left block in both orientations,
/// which breaks the flip invariance of the measure.
fn centroid(gt: &PredictionMap) -> (usize, usize) {
    let (h, w) = (gt.height(), gt.width());
    let mut total = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..h {
        for x in 0..w {
            let g = gt.at(y, x);
            total += g;
            sx += g * (x + 1) as f64;
            sy += g * (y + 1) as f64;
        }
    }
    ((sx / total).floor() as usize, (sy / total).floor() as usize)
}

/// Regional similarity of one quadrant.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x: f64 = pred.iter().sum::<f64>() / n as f64;
    let y: f64 = gt.iter().sum::<f64>() / n as f64;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut sx2 = 0.0;
    let mut sy2 = 0.0;
    let mut sxy = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sx2 += (p - x) * (p - x);
        sy2 += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    sx2 /= denom;
    sy2 /= denom;
    sxy /= denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn quadrant(map: &PredictionMap, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for y in ys {
        for x in xs.clone() {
            out.push(map.at(y, x));
        }
    }
    out
}

fn s_region(pred: &PredictionMap, gt: &PredictionMap) -> f64 {
    let (h, w) = (gt.height(), gt.width());
    let (cx, cy) = centroid(gt);
    // 1-based cut (cx, cy): left/top blocks span cx columns and cy rows.
    let cx = cx.min(w);
    let cy = cy.min(h);
    let area = (h * w) as f64;
    let quads = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let mut q = 0.0;
    for (ys, xs) in quads {
        let weight = (ys.len() * xs.len()) as f64 / area;
        let gq = quadrant(gt, ys.clone(), xs.clone());
        let pq = quadrant(pred, ys, xs);
        q += weight * region_ssim(&pq, &gq);
    }
    q
}
