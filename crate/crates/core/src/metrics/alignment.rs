//! Enhanced-alignment measure, swept over the 256 binarization
//! thresholds of the prediction.

use super::{require_binary, sweep_thresholds, threshold_counts, PredictionMap};
use crate::error::Result;

const EPS: f64 = f64::EPSILON;

fn enhanced(a: f64, b: f64) -> f64 {
    let align = 2.0 * a * b / (a * a + b * b + EPS);
    (align + 1.0) * (align + 1.0) / 4.0
}

/// Returns `(mean, max)` over the threshold sweep; each value in `[0,1]`.
///
/// For each threshold the binarized prediction and the binary gt take
/// only two centered values each, so the alignment map reduces to the
/// four confusion cells; counts come from one histogram pass.
pub fn e_measure(pred: &PredictionMap, gt: &PredictionMap) -> Result<(f64, f64)> {
    pred.check_dims(gt)?;
    require_binary(gt)?;
    let n = (pred.height() * pred.width()) as f64;
    let n_fg: f64 = gt.values().iter().sum();
    let n_bg = n - n_fg;
    let counts = threshold_counts(pred, gt);

    let mut sum = 0.0;
    let mut best = 0.0f64;
    for (i, _t) in sweep_thresholds().enumerate() {
        let (tp, fp) = counts[i];
        let (tp, fp) = (tp as f64, fp as f64);
        let mu_fm = (tp + fp) / n;
        let score = if n_fg == 0.0 {
            // All-background gt: enhanced matrix is 1 - FM.
            1.0 - mu_fm
        } else if n_bg == 0.0 {
            // All-foreground gt: enhanced matrix is FM.
            mu_fm
        } else {
            let mu_gt = n_fg / n;
            let fg_in = 1.0 - mu_gt;
            let bg_in = -mu_gt;
            let fm_in = 1.0 - mu_fm;
            let fm_out = -mu_fm;
            let fn_ = n_fg - tp;
            let tn = n_bg - fp;
            (tp * enhanced(fg_in, fm_in)
                + fn_ * enhanced(fg_in, fm_out)
                + fp * enhanced(bg_in, fm_in)
                + tn * enhanced(bg_in, fm_out))
                / n
        };
        sum += score;
        best = best.max(score);
    }
    Ok((sum / 256.0, best))
}
