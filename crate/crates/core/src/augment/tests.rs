use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::segnet::{SegArch, SegModel};
use crate::tensor::check_gradients;

fn tiny_model(seed: u64) -> SegModel {
    SegModel::new(
        SegArch {
            in_channels: 3,
            widths: vec![4, 6],
        },
        seed,
    )
}

fn random_chw(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Vec<f64> {
    (0..c * n * n).map(|_| rng.gen_range(0.0..=1.0)).collect()
}

#[test]
fn color_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::new();
    let img = g.constant(random_chw(&mut rng, 3, 8), &[3, 8, 8]);
    let pt = AugmenterParams::identity().to_tensors(&g, false);
    let out = apply_color(&img, &pt).unwrap();
    assert_eq!(out.value(), img.value());
}

#[test]
fn color_brightness_shift() {
    let g = Graph::new();
    let img = g.constant(vec![0.5; 3 * 16], &[3, 4, 4]);
    let mut p = AugmenterParams::identity();
    p.brightness = 0.1;
    let out = apply_color(&img, &p.to_tensors(&g, false)).unwrap();
    for v in out.value() {
        assert_relative_eq!(v, 0.6, epsilon = 1e-12);
    }
}

#[test]
fn color_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_chw(&mut rng, 3, 6);
    let report = check_gradients(
        move |leaves| {
            let g = leaves[0].graph.clone();
            let pt = ParamTensors {
                brightness: leaves[0].clone(),
                log_contrast: leaves[1].clone(),
                gains: leaves[2].clone(),
                angle: g.scalar(0.0),
                log_scale: g.scalar(0.0),
                translate_x: g.scalar(0.0),
                translate_y: g.scalar(0.0),
            };
            let x = g.constant(img.clone(), &[3, 6, 6]);
            Ok(apply_color(&x, &pt)?.mean())
        },
        &[
            (vec![1], vec![0.07]),
            (vec![1], vec![0.2]),
            (vec![3], vec![1.1, 0.9, 1.05]),
        ],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn geometric_identity_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::new();
    let img = g.constant(random_chw(&mut rng, 3, 8), &[3, 8, 8]);
    let pt = AugmenterParams::identity().to_tensors(&g, false);
    let out = apply_geometric(&img, None, &pt, &ParamBounds::default()).unwrap();
    for (o, i) in out.image.value().iter().zip(img.value()) {
        assert_relative_eq!(*o, i, epsilon = 1e-6);
    }
}

#[test]
fn geometric_quarter_turn_rotates_pixel_array() {
    // 2x2 pixel centers land exactly on rotated centers, so a quarter
    // turn permutes the pixels: [[a,b],[c,d]] -> [[c,a],[d,b]].
    let g = Graph::new();
    let (a, b, c, d) = (0.1, 0.4, 0.7, 0.9);
    let img = g.constant(vec![a, b, c, d], &[1, 2, 2]);
    let mut p = AugmenterParams::identity();
    p.angle = std::f64::consts::FRAC_PI_2;
    let out = apply_geometric(&img, None, &p.to_tensors(&g, false), &ParamBounds::default())
        .unwrap();
    let v = out.image.value();
    assert_relative_eq!(v[0], c, epsilon = 1e-9);
    assert_relative_eq!(v[1], a, epsilon = 1e-9);
    assert_relative_eq!(v[2], d, epsilon = 1e-9);
    assert_relative_eq!(v[3], b, epsilon = 1e-9);
}

#[test]
fn geometric_rejects_out_of_bounds_translation() {
    let g = Graph::new();
    let img = g.constant(vec![0.5; 16], &[1, 4, 4]);
    let mut p = AugmenterParams::identity();
    p.translate_x = 1.0;
    assert!(matches!(
        apply_geometric(&img, None, &p.to_tensors(&g, false), &ParamBounds::default()),
        Err(Error::ParamRange(_))
    ));
}

#[test]
fn compose_identity_and_mask_handling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Graph::new();
    let img = g.constant(random_chw(&mut rng, 3, 8), &[3, 8, 8]);
    let mask = g.constant(
        (0..64).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
        &[1, 8, 8],
    );
    let pt = AugmenterParams::identity().to_tensors(&g, false);
    let out = compose_augment(&img, Some(&mask), &pt).unwrap();
    for (o, i) in out.image.value().iter().zip(img.value()) {
        assert_relative_eq!(*o, i, epsilon = 1e-6);
    }

    // Color-only parameters leave the mask untouched (up to the
    // identity warp's rounding).
    let mut p = AugmenterParams::identity();
    p.brightness = 0.2;
    p.gains = [1.3, 0.8, 1.0];
    let out = compose_augment(&img, Some(&mask), &p.to_tensors(&g, false)).unwrap();
    for (o, i) in out.mask.unwrap().value().iter().zip(mask.value()) {
        assert_relative_eq!(*o, i, epsilon = 1e-9);
    }
}

#[test]
fn compose_equals_manual_sequencing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let img = g.constant(random_chw(&mut rng, 3, 8), &[3, 8, 8]);
    let p = AugmenterParams {
        brightness: 0.05,
        log_contrast: 0.15,
        gains: [1.1, 0.9, 1.02],
        angle: 0.3,
        log_scale: -0.1,
        translate_x: 0.08,
        translate_y: -0.04,
    };
    let pt = p.to_tensors(&g, false);
    let composed = compose_augment(&img, None, &pt).unwrap();
    let manual = apply_color(
        &apply_geometric(&img, None, &pt, &ParamBounds::default()).unwrap().image,
        &pt,
    )
    .unwrap();
    for (a, b) in composed.image.value().iter().zip(manual.value()) {
        assert_relative_eq!(*a, b, epsilon = 1e-9);
    }
}

#[test]
fn warped_masks_stay_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..10 {
        let g = Graph::new();
        let img = g.constant(random_chw(&mut rng, 3, 8), &[3, 8, 8]);
        let mask = g.constant(
            (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect(),
            &[1, 8, 8],
        );
        let p = AugmenterParams::identity().jittered(0.3, trial, &ParamBounds::default());
        let out = compose_augment(&img, Some(&mask), &p.to_tensors(&g, false)).unwrap();
        assert!(out
            .mask
            .unwrap()
            .value()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn aug_loss_cancellation_sign_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = Graph::new();
    let gt: Vec<f64> = (0..64).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let gt_t = g.constant(gt.clone(), &[64]);

    // Identical predictions cancel exactly.
    let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.05..0.95)).collect();
    let pt = g.constant(p.clone(), &[64]);
    assert_eq!(aug_loss(&pt, &pt, &gt_t).unwrap().scalar_value(), 0.0);

    // Perfect teacher vs random student is negative.
    let perfect = g.constant(gt.clone(), &[64]);
    let student: Vec<f64> = (0..64).map(|_| rng.gen_range(0.05..0.95)).collect();
    let st = g.constant(student.clone(), &[64]);
    assert!(aug_loss(&perfect, &st, &gt_t).unwrap().scalar_value() < 0.0);

    // Antisymmetry under swapping the two predictions.
    let l_ts = aug_loss(&pt, &st, &gt_t).unwrap().scalar_value();
    let l_st = aug_loss(&st, &pt, &gt_t).unwrap().scalar_value();
    assert_relative_eq!(l_ts, -l_st, epsilon = 1e-12);

    // Brute-force BCE difference.
    let bce = |pred: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (p, t) in pred.iter().zip(&gt) {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            acc += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        acc / pred.len() as f64
    };
    assert_relative_eq!(l_ts, bce(&p) - bce(&student), epsilon = 1e-9);
}

#[test]
fn augmenter_step_zero_lr_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let teacher = tiny_model(1);
    let student = tiny_model(2);
    let batch = vec![(
        random_chw(&mut rng, 3, 8),
        (0..64).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
    )];
    let mut params = AugmenterParams::identity();
    let before = params;
    let report = augmenter_step(
        &mut params,
        &batch,
        (8, 8),
        &teacher,
        &student,
        0.0,
        &ParamBounds::default(),
    )
    .unwrap();
    assert_eq!(params, before);
    assert!(!report.decreased);
}

#[test]
fn augmenter_step_decreases_loss_and_freezes_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let teacher = tiny_model(3);
    let student = tiny_model(4);
    let t_digest = teacher.weights_digest();
    let s_digest = student.weights_digest();
    let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..2)
        .map(|_| {
            (
                random_chw(&mut rng, 3, 8),
                (0..64).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
            )
        })
        .collect();
    let mut params = AugmenterParams::identity().jittered(0.1, 5, &ParamBounds::default());
    let report = augmenter_step(
        &mut params,
        &batch,
        (8, 8),
        &teacher,
        &student,
        0.05,
        &ParamBounds::default(),
    )
    .unwrap();
    assert!(report.decreased, "no decrease: {report:?}");
    assert!(report.loss_after < report.loss_before);
    assert_eq!(teacher.weights_digest(), t_digest);
    assert_eq!(student.weights_digest(), s_digest);
}

#[test]
fn augmenter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let teacher = tiny_model(5);
    let student = tiny_model(6);
    let img = random_chw(&mut rng, 3, 8);
    let gt: Vec<f64> = (0..64).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let report = check_gradients(
        move |leaves| {
            let g = leaves[0].graph.clone();
            let pt = ParamTensors {
                brightness: leaves[0].clone(),
                log_contrast: leaves[1].clone(),
                gains: leaves[2].clone(),
                angle: leaves[3].clone(),
                log_scale: leaves[4].clone(),
                translate_x: leaves[5].clone(),
                translate_y: leaves[6].clone(),
            };
            let x = g.constant(img.clone(), &[3, 8, 8]);
            let m = g.constant(gt.clone(), &[1, 8, 8]);
            let aug = compose_augment(&x, Some(&m), &pt)?;
            let (t_pred, _) = teacher.forward(&g, &aug.image, None)?;
            let (s_pred, _) = student.forward(&g, &aug.image, None)?;
            aug_loss(&t_pred, &s_pred, &aug.mask.unwrap())
        },
        &[
            (vec![1], vec![0.03]),
            (vec![1], vec![0.11]),
            (vec![3], vec![1.05, 0.93, 1.0]),
            (vec![1], vec![0.21]),
            (vec![1], vec![-0.07]),
            (vec![1], vec![0.06]),
            (vec![1], vec![-0.09]),
        ],
        1e-6,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}
