//! Trainable color and geometric augmenters and the adversarial
//! objective that trains them: make the teacher look good and the
//! student look bad on the same augmented batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::SegModel;
use crate::tensor::{loss_bce, Graph, Tensor};

/// Trainable augmenter parameters. Contrast and scale are stored in log
/// space so positivity is structural.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmenterParams {
    pub brightness: f64,
    pub log_contrast: f64,
    pub gains: [f64; 3],
    pub angle: f64,
    pub log_scale: f64,
    pub translate_x: f64,
    pub translate_y: f64,
}

impl AugmenterParams {
    /// The identity element: applying it leaves images untouched.
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            log_contrast: 0.0,
            gains: [1.0, 1.0, 1.0],
            angle: 0.0,
            log_scale: 0.0,
            translate_x: 0.0,
            translate_y: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 9] {
        [
            self.brightness,
            self.log_contrast,
            self.gains[0],
            self.gains[1],
            self.gains[2],
            self.angle,
            self.log_scale,
            self.translate_x,
            self.translate_y,
        ]
    }

    pub fn from_array(v: [f64; 9]) -> Self {
        Self {
            brightness: v[0],
            log_contrast: v[1],
            gains: [v[2], v[3], v[4]],
            angle: v[5],
            log_scale: v[6],
            translate_x: v[7],
            translate_y: v[8],
        }
    }

    /// Bind as graph tensors; trainable bindings receive gradients.
    pub fn to_tensors(&self, g: &Graph, trainable: bool) -> ParamTensors {
        ParamTensors {
            brightness: g.leaf(vec![self.brightness], &[1], trainable),
            log_contrast: g.leaf(vec![self.log_contrast], &[1], trainable),
            gains: g.leaf(self.gains.to_vec(), &[3], trainable),
            angle: g.leaf(vec![self.angle], &[1], trainable),
            log_scale: g.leaf(vec![self.log_scale], &[1], trainable),
            translate_x: g.leaf(vec![self.translate_x], &[1], trainable),
            translate_y: g.leaf(vec![self.translate_y], &[1], trainable),
        }
    }

    pub fn project(&mut self, bounds: &ParamBounds) {
        self.brightness = self.brightness.clamp(-bounds.brightness, bounds.brightness);
        self.log_contrast = self
            .log_contrast
            .clamp(-bounds.log_contrast, bounds.log_contrast);
        for gv in &mut self.gains {
            *gv = gv.clamp(bounds.gain_min, bounds.gain_max);
        }
        self.angle = self.angle.clamp(-bounds.angle, bounds.angle);
        self.log_scale = self.log_scale.clamp(-bounds.log_scale, bounds.log_scale);
        self.translate_x = self.translate_x.clamp(-bounds.translate, bounds.translate);
        self.translate_y = self.translate_y.clamp(-bounds.translate, bounds.translate);
    }

    /// Gaussian jitter around the learned values, projected back into
    /// bounds. Used once per epoch to keep the augmenter from collapsing
    /// onto a single transform.
    pub fn jittered(&self, sigma: f64, seed: u64, bounds: &ParamBounds) -> AugmenterParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, sigma).expect("positive sigma");
        let mut v = self.as_array();
        for x in &mut v {
            *x += dist.sample(&mut rng);
        }
        let mut out = Self::from_array(v);
        out.project(bounds);
        out
    }

    fn check_geo_bounds(&self, bounds: &ParamBounds) -> Result<()> {
        if self.angle.abs() > bounds.angle
            || self.log_scale.abs() > bounds.log_scale
            || self.translate_x.abs() > bounds.translate
            || self.translate_y.abs() > bounds.translate
        {
            return Err(Error::ParamRange(format!(
                "geometric parameters outside bounds: angle {}, log_scale {}, t ({}, {})",
                self.angle, self.log_scale, self.translate_x, self.translate_y
            )));
        }
        Ok(())
    }
}

/// Projection box for the augmenter parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParamBounds {
    pub brightness: f64,
    pub log_contrast: f64,
    pub gain_min: f64,
    pub gain_max: f64,
    pub angle: f64,
    pub log_scale: f64,
    pub translate: f64,
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            brightness: 0.5,
            log_contrast: std::f64::consts::LN_2,
            gain_min: 0.5,
            gain_max: 2.0,
            angle: std::f64::consts::PI,
            log_scale: std::f64::consts::LN_2,
            translate: 0.5,
        }
    }
}

/// Graph-bound augmenter parameters.
pub struct ParamTensors {
    pub brightness: Tensor,
    pub log_contrast: Tensor,
    pub gains: Tensor,
    pub angle: Tensor,
    pub log_scale: Tensor,
    pub translate_x: Tensor,
    pub translate_y: Tensor,
}

impl ParamTensors {
    fn values(&self) -> AugmenterParams {
        AugmenterParams {
            brightness: self.brightness.scalar_value(),
            log_contrast: self.log_contrast.scalar_value(),
            gains: {
                let g = self.gains.value();
                [g[0], g[1], g[2]]
            },
            angle: self.angle.scalar_value(),
            log_scale: self.log_scale.scalar_value(),
            translate_x: self.translate_x.scalar_value(),
            translate_y: self.translate_y.scalar_value(),
        }
    }

    /// Gradients in `as_array` order after a backward pass.
    pub fn gradients(&self) -> Option<[f64; 9]> {
        let b = self.brightness.grad()?;
        let c = self.log_contrast.grad()?;
        let g = self.gains.grad()?;
        let a = self.angle.grad()?;
        let s = self.log_scale.grad()?;
        let tx = self.translate_x.grad()?;
        let ty = self.translate_y.grad()?;
        Some([b[0], c[0], g[0], g[1], g[2], a[0], s[0], tx[0], ty[0]])
    }
}

/// An augmented sample: the transformed image, the warp grid that was
/// applied, and the identically warped mask when one was supplied.
pub struct AugmentedSample {
    pub image: Tensor,
    pub grid: Tensor,
    pub mask: Option<Tensor>,
}

/// Color map `g_ch * (c*(x - 0.5) + 0.5) + b`, unclamped so gradients
/// survive saturation; clamp only when rendering.
pub fn apply_color(img: &Tensor, p: &ParamTensors) -> Result<Tensor> {
    if img.shape().len() != 3 || img.shape()[0] != 3 {
        return Err(Error::Shape(format!(
            "color augmenter expects [3,H,W], got {:?}",
            img.shape()
        )));
    }
    let contrast = p.log_contrast.exp();
    let scale = p.gains.scale_by(&contrast)?;
    let half_shift = contrast.mul_scalar(-0.5).add_scalar(0.5);
    let offset = p.gains.scale_by(&half_shift)?.offset_by(&p.brightness)?;
    img.channel_affine(&scale, &offset)
}

/// Inverse-warp by rotation/scale/translation through the bilinear
/// sampler; the same grid warps the optional mask. Out-of-range samples
/// read zero.
pub fn apply_geometric(
    img: &Tensor,
    mask: Option<&Tensor>,
    p: &ParamTensors,
    bounds: &ParamBounds,
) -> Result<AugmentedSample> {
    p.values().check_geo_bounds(bounds)?;
    let [_, h, w] = img.shape()[..] else {
        return Err(Error::Shape(format!(
            "geometric augmenter expects [C,H,W], got {:?}",
            img.shape()
        )));
    };
    let g = img.graph.clone();
    let n = h * w;
    let mut px = Vec::with_capacity(n);
    let mut py = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            px.push((2.0 * x as f64 + 1.0) / w as f64 - 1.0);
            py.push((2.0 * y as f64 + 1.0) / h as f64 - 1.0);
        }
    }
    let px = g.constant(px, &[n]);
    let py = g.constant(py, &[n]);
    // Inverse map: src = R(-angle) * (dst - t) / scale.
    let cos_t = p.angle.cos();
    let sin_t = p.angle.sin();
    let inv_scale = p.log_scale.neg().exp();
    let dx = px.offset_by(&p.translate_x.neg())?;
    let dy = py.offset_by(&p.translate_y.neg())?;
    let sx = dx
        .scale_by(&cos_t)?
        .add(&dy.scale_by(&sin_t)?)?
        .scale_by(&inv_scale)?;
    let sy = dx
        .scale_by(&sin_t.neg())?
        .add(&dy.scale_by(&cos_t)?)?
        .scale_by(&inv_scale)?;
    let grid = sx.interleave2(&sy)?.reshape(&[h, w, 2])?;
    let image = img.bilinear_sample(&grid)?;
    let mask = match mask {
        Some(m) => Some(m.bilinear_sample(&grid)?),
        None => None,
    };
    Ok(AugmentedSample { image, grid, mask })
}

/// Eq-order composition: geometry first, then color. The mask receives
/// only the geometric warp.
pub fn compose_augment(
    img: &Tensor,
    mask: Option<&Tensor>,
    p: &ParamTensors,
) -> Result<AugmentedSample> {
    compose_augment_bounded(img, mask, p, &ParamBounds::default())
}

pub fn compose_augment_bounded(
    img: &Tensor,
    mask: Option<&Tensor>,
    p: &ParamTensors,
    bounds: &ParamBounds,
) -> Result<AugmentedSample> {
    let geo = apply_geometric(img, mask, p, bounds)?;
    Ok(AugmentedSample {
        image: apply_color(&geo.image, p)?,
        grid: geo.grid,
        mask: geo.mask,
    })
}

/// Adversarial objective: `BCE(teacher, gt) - BCE(student, gt)`.
/// Negative when the teacher beats the student on the augmented input.
pub fn aug_loss(teacher_pred: &Tensor, student_pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    loss_bce(teacher_pred, gt)?.sub(&loss_bce(student_pred, gt)?)
}

/// Outcome of one augmenter descent step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub accepted_lr: f64,
    pub decreased: bool,
}

fn eval_aug_loss(
    params: &AugmenterParams,
    batch: &[(Tensor, Tensor)],
    teacher: &SegModel,
    student: &SegModel,
    g: &Graph,
    trainable: bool,
) -> Result<(Tensor, ParamTensors)> {
    let pt = params.to_tensors(g, trainable);
    let mut total: Option<Tensor> = None;
    for (img, gt) in batch {
        // The augmented image stays unclamped so saturation does not
        // kill the color gradients; the warped mask is a convex
        // combination and already lies in [0,1].
        let aug = compose_augment(img, Some(gt), &pt)?;
        let warped_gt = aug.mask.as_ref().expect("mask supplied");
        let (t_pred, _) = teacher.forward(g, &aug.image, None)?;
        let (s_pred, _) = student.forward(g, &aug.image, None)?;
        let l = aug_loss(&t_pred, &s_pred, warped_gt)?;
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    let total = total
        .ok_or_else(|| Error::ParamRange("augmenter step needs a non-empty batch".into()))?
        .mul_scalar(1.0 / batch.len() as f64);
    Ok((total, pt))
}

/// Mean adversarial loss of the batch under `params`; models frozen.
pub fn augmenter_loss(
    params: &AugmenterParams,
    batch: &[(Tensor, Tensor)],
    teacher: &SegModel,
    student: &SegModel,
) -> Result<f64> {
    let g = batch[0].0.graph.clone();
    let (loss, _) = eval_aug_loss(params, batch, teacher, student, &g, false)?;
    Ok(loss.scalar_value())
}

/// One projected gradient-descent step on the adversarial loss, with a
/// halving line search (up to 8 halvings) that insists on a strict
/// decrease. Model weights are never touched. `lr == 0` is a no-op.
///
/// `batch` pairs are (image, mask) value vectors at the working extent.
pub fn augmenter_step(
    params: &mut AugmenterParams,
    batch: &[(Vec<f64>, Vec<f64>)],
    extent: (usize, usize),
    teacher: &SegModel,
    student: &SegModel,
    lr: f64,
    bounds: &ParamBounds,
) -> Result<StepReport> {
    let (h, w) = extent;
    let to_graph = |g: &Graph| -> Vec<(Tensor, Tensor)> {
        batch
            .iter()
            .map(|(img, gt)| {
                (
                    g.constant(img.clone(), &[3, h, w]),
                    g.constant(gt.clone(), &[1, h, w]),
                )
            })
            .collect()
    };

    let g = Graph::new();
    let gb = to_graph(&g);
    let (loss, pt) = eval_aug_loss(params, &gb, teacher, student, &g, true)?;
    let loss_before = loss.scalar_value();
    if lr == 0.0 {
        return Ok(StepReport {
            loss_before,
            loss_after: loss_before,
            accepted_lr: 0.0,
            decreased: false,
        });
    }
    loss.backward()?;
    let grad = pt.gradients().expect("trainable augmenter binding");
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }

    let base = params.as_array();
    let mut step_lr = lr;
    for _ in 0..=8 {
        let mut cand = [0.0; 9];
        for i in 0..9 {
            cand[i] = base[i] - step_lr * grad[i];
        }
        let mut cand = AugmenterParams::from_array(cand);
        cand.project(bounds);
        let g2 = Graph::new();
        let gb2 = to_graph(&g2);
        let (l2, _) = eval_aug_loss(&cand, &gb2, teacher, student, &g2, false)?;
        let loss_after = l2.scalar_value();
        if loss_after < loss_before {
            *params = cand;
            return Ok(StepReport {
                loss_before,
                loss_after,
                accepted_lr: step_lr,
                decreased: true,
            });
        }
        step_lr *= 0.5;
    }
    Ok(StepReport {
        loss_before,
        loss_after: loss_before,
        accepted_lr: 0.0,
        decreased: false,
    })
}

#[cfg(test)]
mod tests;
