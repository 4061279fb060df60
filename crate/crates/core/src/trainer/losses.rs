//! The loss stack: BCE+IoU+SSIM segmentation loss, the supervised and
//! unsupervised composites, and their weighted total.

use crate::config::{AttnLossKind, TrainSection};
use crate::error::{Error, Result};
use crate::metrics::{gaussian_window, SSIM_C1, SSIM_C2, SSIM_WINDOW};
use crate::tensor::{loss_bce, Graph, Tensor};
use crate::tfm::AttnLossVariant;

const IOU_EPS: f64 = 1e-6;

/// Which segmentation-loss components are active.
#[derive(Debug, Clone, Copy)]
pub struct SegLossCfg {
    pub bce: bool,
    pub iou: bool,
    pub ssim: bool,
}

impl From<&TrainSection> for SegLossCfg {
    fn from(t: &TrainSection) -> Self {
        Self {
            bce: t.seg_bce,
            iou: t.seg_iou,
            ssim: t.seg_ssim,
        }
    }
}

pub(crate) fn attn_variant(kind: AttnLossKind) -> AttnLossVariant {
    match kind {
        AttnLossKind::MaxRescaled => AttnLossVariant::MaxRescaled,
        AttnLossKind::Raw => AttnLossVariant::Raw,
    }
}

/// Soft IoU loss: `1 - (sum(p*t)+eps) / (sum(p)+sum(t)-sum(p*t)+eps)`.
fn iou_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let inter = pred.mul(target)?.sum();
    let union = pred.sum().add(&target.sum())?.sub(&inter)?;
    let ratio = inter.add_scalar(IOU_EPS).div(&union.add_scalar(IOU_EPS))?;
    Ok(ratio.neg().add_scalar(1.0))
}

/// Differentiable mean local SSIM with the metrics window (11x11
/// Gaussian, sigma 1.5) as a loss: `1 - SSIM(pred, target)`.
/// Extents must be at least the window size.
fn ssim_loss(g: &Graph, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let [_, h, w] = pred.shape()[..] else {
        return Err(Error::Shape(format!(
            "ssim loss expects [1,H,W], got {:?}",
            pred.shape()
        )));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim loss needs extents >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = g.constant(gaussian_window(), &[1, 1, SSIM_WINDOW, SSIM_WINDOW]);
    let conv = |x: &Tensor| x.conv2d(&win, 1, 0);
    let mu_p = conv(pred)?;
    let mu_t = conv(target)?;
    let var_p = conv(&pred.mul(pred)?)?.sub(&mu_p.mul(&mu_p)?)?;
    let var_t = conv(&target.mul(target)?)?.sub(&mu_t.mul(&mu_t)?)?;
    let cov = conv(&pred.mul(target)?)?.sub(&mu_p.mul(&mu_t)?)?;
    let num = mu_p
        .mul(&mu_t)?
        .mul_scalar(2.0)
        .add_scalar(SSIM_C1)
        .mul(&cov.mul_scalar(2.0).add_scalar(SSIM_C2))?;
    let den = mu_p
        .mul(&mu_p)?
        .add(&mu_t.mul(&mu_t)?)?
        .add_scalar(SSIM_C1)
        .mul(&var_p.add(&var_t)?.add_scalar(SSIM_C2))?;
    Ok(num.div(&den)?.mean().neg().add_scalar(1.0))
}

/// Combined segmentation loss over a `[1,H,W]` prediction and target.
pub fn seg_loss(g: &Graph, pred: &Tensor, target: &Tensor, cfg: SegLossCfg) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "seg loss on {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut total: Option<Tensor> = None;
    let mut push = |t: Tensor| {
        total = Some(match total.take() {
            Some(acc) => acc.add(&t).expect("scalar add"),
            None => t,
        });
    };
    if cfg.bce {
        push(loss_bce(pred, target)?);
    }
    if cfg.iou {
        push(iou_loss(pred, target)?);
    }
    if cfg.ssim {
        push(ssim_loss(g, pred, target)?);
    }
    total.ok_or_else(|| Error::Config("all segmentation loss components disabled".into()))
}

/// `L_total = L_s + lambda_u * L_u`.
pub fn total_loss(sup: &Tensor, unsup: &Tensor, lambda_u: f64) -> Result<Tensor> {
    if lambda_u < 0.0 {
        return Err(Error::ParamRange(format!(
            "lambda_u must be non-negative, got {lambda_u}"
        )));
    }
    sup.add(&unsup.mul_scalar(lambda_u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ALL: SegLossCfg = SegLossCfg {
        bce: true,
        iou: true,
        ssim: true,
    };

    fn rand_map(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n * n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let mask: Vec<f64> = (0..256)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect();
        let t = g.constant(mask.clone(), &[1, 16, 16]);
        // Predictions cannot be exactly binary (sigmoid outputs); use a
        // saturated approximation.
        let p = g.constant(
            mask.iter().map(|&v| v * 0.9999 + 0.00005).collect(),
            &[1, 16, 16],
        );
        let l = seg_loss(&g, &p, &t, ALL).unwrap().scalar_value();
        assert!(l < 1e-3, "loss {l}");
    }

    #[test]
    fn inverted_prediction_has_iou_loss_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let mask: Vec<f64> = (0..256)
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let t = g.constant(mask.clone(), &[1, 16, 16]);
        let p = g.constant(mask.iter().map(|&v| 1.0 - v).collect(), &[1, 16, 16]);
        let l = iou_loss(&p, &t).unwrap().scalar_value();
        assert!(l > 0.999, "iou loss {l}");
    }

    #[test]
    fn composition_matches_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let p = g.constant(rand_map(&mut rng, 16, 0.05, 0.95), &[1, 16, 16]);
        let t = g.constant(rand_map(&mut rng, 16, 0.0, 1.0), &[1, 16, 16]);
        let total = seg_loss(&g, &p, &t, ALL).unwrap().scalar_value();
        let bce = loss_bce(&p, &t).unwrap().scalar_value();
        let iou = iou_loss(&p, &t).unwrap().scalar_value();
        let ssim = ssim_loss(&g, &p, &t).unwrap().scalar_value();
        assert_relative_eq!(total, bce + iou + ssim, epsilon = 1e-9);
    }

    #[test]
    fn graph_ssim_agrees_with_metrics_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_map(&mut rng, 16, 0.0, 1.0);
        let b = rand_map(&mut rng, 16, 0.0, 1.0);
        let g = Graph::new();
        let at = g.constant(a.clone(), &[1, 16, 16]);
        let bt = g.constant(b.clone(), &[1, 16, 16]);
        let loss = ssim_loss(&g, &at, &bt).unwrap().scalar_value();
        let pm = crate::metrics::PredictionMap::new(16, 16, a).unwrap();
        let qm = crate::metrics::PredictionMap::new(16, 16, b).unwrap();
        let reference = crate::metrics::ssim(&pm, &qm).unwrap();
        assert_relative_eq!(loss, 1.0 - reference, epsilon = 1e-9);
    }

    #[test]
    fn seg_loss_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = rand_map(&mut rng, 16, 0.0, 1.0);
        let pred = rand_map(&mut rng, 16, 0.1, 0.9);
        let report = crate::tensor::check_gradients_sampled(
            move |leaves| {
                let g = leaves[0].graph.clone();
                let p = leaves[0].reshape(&[1, 16, 16])?;
                let t = g.constant(target.clone(), &[1, 16, 16]);
                seg_loss(&g, &p, &t, ALL)
            },
            &[(vec![256], pred)],
            1e-5,
            1e-4,
            64,
            7,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn total_loss_is_linear_in_lambda() {
        let g = Graph::new();
        let sup = g.scalar(0.8);
        let unsup = g.scalar(0.3);
        assert_eq!(total_loss(&sup, &unsup, 0.0).unwrap().scalar_value(), 0.8);
        assert_relative_eq!(
            total_loss(&sup, &unsup, 1.0).unwrap().scalar_value(),
            1.1,
            epsilon = 1e-15
        );
        // Two-point linearity check.
        let l1 = total_loss(&sup, &unsup, 0.7).unwrap().scalar_value();
        let l2 = total_loss(&sup, &unsup, 1.4).unwrap().scalar_value();
        assert_relative_eq!(l2 - l1, 0.7 * 0.3, epsilon = 1e-12);
        assert!(total_loss(&sup, &unsup, -0.1).is_err());
    }
}
