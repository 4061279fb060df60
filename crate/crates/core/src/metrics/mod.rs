//! Evaluation protocol for camouflaged-object segmentation: MAE, SSIM,
//! S-measure, mean/max E-measure and mean/weighted F-measure, plus the
//! MAE/SSIM primitives the selection score and the SSIM loss reuse.

mod alignment;
mod fmeasure;
mod ssim;
mod structure;

pub use alignment::e_measure;
pub use fmeasure::f_measure;
pub use ssim::{constant_patch_ssim, gaussian_window, ssim, SSIM_C1, SSIM_C2, SSIM_WINDOW};
pub use structure::s_measure;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense grid of reals in `[0,1]`: a model prediction or a ground-truth
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl PredictionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "map data length {} != {height}x{width}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ParamRange(format!(
                "prediction map value {v} outside [0,1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Hard-threshold into a binary map: `v >= tau`.
    pub fn binarize(&self, tau: f64) -> PredictionMap {
        PredictionMap {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v >= tau { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn flip_horizontal(&self) -> PredictionMap {
        let mut values = Vec::with_capacity(self.values.len());
        for y in 0..self.height {
            for x in 0..self.width {
                values.push(self.at(y, self.width - 1 - x));
            }
        }
        PredictionMap {
            height: self.height,
            width: self.width,
            values,
        }
    }

    fn check_dims(&self, other: &PredictionMap) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "map dimensions disagree: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// All protocol metrics for one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub ssim: f64,
    pub s_measure: f64,
    pub e_measure_mean: f64,
    pub e_measure_max: f64,
    pub f_measure_mean: f64,
    pub f_measure_weighted: f64,
}

impl MetricReport {
    /// Arithmetic mean of a batch of reports, in the given order.
    pub fn mean_of(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let mut acc = MetricReport {
            mae: 0.0,
            ssim: 0.0,
            s_measure: 0.0,
            e_measure_mean: 0.0,
            e_measure_max: 0.0,
            f_measure_mean: 0.0,
            f_measure_weighted: 0.0,
        };
        for r in reports {
            acc.mae += r.mae;
            acc.ssim += r.ssim;
            acc.s_measure += r.s_measure;
            acc.e_measure_mean += r.e_measure_mean;
            acc.e_measure_max += r.e_measure_max;
            acc.f_measure_mean += r.f_measure_mean;
            acc.f_measure_weighted += r.f_measure_weighted;
        }
        acc.mae /= n;
        acc.ssim /= n;
        acc.s_measure /= n;
        acc.e_measure_mean /= n;
        acc.e_measure_max /= n;
        acc.f_measure_mean /= n;
        acc.f_measure_weighted /= n;
        acc
    }
}

/// Mean absolute error over all pixels. Symmetric in its arguments.
pub fn mae(pred: &PredictionMap, gt: &PredictionMap) -> Result<f64> {
    pred.check_dims(gt)?;
    let n = pred.values.len() as f64;
    Ok(pred
        .values
        .iter()
        .zip(&gt.values)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Run the full protocol on one pair. `gt` must be binary.
pub fn evaluate(pred: &PredictionMap, gt: &PredictionMap) -> Result<MetricReport> {
    pred.check_dims(gt)?;
    let (e_mean, e_max) = e_measure(pred, gt)?;
    let (f_mean, f_weighted) = f_measure(pred, gt)?;
    Ok(MetricReport {
        mae: mae(pred, gt)?,
        ssim: ssim(pred, gt)?,
        s_measure: s_measure(pred, gt, 0.5)?,
        e_measure_mean: e_mean,
        e_measure_max: e_max,
        f_measure_mean: f_mean,
        f_measure_weighted: f_weighted,
    })
}

/// The 256 binarization thresholds used by the E- and F-measure sweeps.
/// `(i+1)/256` keeps every threshold strictly positive, so an exact
/// binary match scores 1 across the whole sweep.
pub(crate) fn sweep_thresholds() -> impl Iterator<Item = f64> {
    (0..256).map(|i| (i + 1) as f64 / 256.0)
}

/// Per-threshold confusion counts for a prediction against a binary gt,
/// derived from one histogram pass: entry `i` holds (TP, FP) for the
/// threshold `(i+1)/256` with binarization `pred >= t`.
pub(crate) fn threshold_counts(pred: &PredictionMap, gt: &PredictionMap) -> Vec<(usize, usize)> {
    // 256*p is an exact power-of-two scaling, so floor(256*p) >= i+1
    // is exactly equivalent to p >= (i+1)/256.
    let mut fg_hist = [0usize; 257];
    let mut bg_hist = [0usize; 257];
    for (p, g) in pred.values.iter().zip(&gt.values) {
        let bin = (256.0 * p).floor().min(256.0) as usize;
        if *g == 1.0 {
            fg_hist[bin] += 1;
        } else {
            bg_hist[bin] += 1;
        }
    }
    // Suffix sums: pixels passing threshold i are those with bin >= i+1.
    let mut out = vec![(0usize, 0usize); 256];
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in (0..256).rev() {
        tp += fg_hist[i + 1];
        fp += bg_hist[i + 1];
        out[i] = (tp, fp);
    }
    out
}

pub(crate) fn require_binary(gt: &PredictionMap) -> Result<()> {
    if gt.is_binary() {
        Ok(())
    } else {
        Err(Error::ParamRange(
            "ground truth must be binary (values in {0,1})".into(),
        ))
    }
}

#[cfg(test)]
mod tests;
