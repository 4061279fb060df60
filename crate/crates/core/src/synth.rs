//! Deterministic synthetic-camouflage generator: procedural noise
//! backgrounds, shape-family objects whose texture blends into the
//! background with weight kappa, exact binary masks, and templated
//! referring text. Everything derives from the seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SynthSection;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Sample, Split};
use crate::util::derive_seed;

/// Background palettes; the name feeds the referring-text template.
const PALETTES: &[(&str, [f64; 3], [f64; 3])] = &[
    ("mossy", [0.16, 0.30, 0.12], [0.45, 0.58, 0.28]),
    ("sandy", [0.62, 0.52, 0.34], [0.82, 0.74, 0.55]),
    ("rocky", [0.32, 0.32, 0.34], [0.58, 0.57, 0.60]),
    ("leafy", [0.10, 0.24, 0.10], [0.36, 0.52, 0.22]),
];

/// Secondary palettes for the object's own texture (visible when kappa
/// is below 1).
const OBJECT_PALETTES: &[([f64; 3], [f64; 3])] = &[
    ([0.55, 0.20, 0.15], [0.85, 0.45, 0.25]),
    ([0.20, 0.25, 0.55], [0.45, 0.55, 0.85]),
    ([0.50, 0.45, 0.15], [0.80, 0.75, 0.35]),
    ([0.40, 0.15, 0.45], [0.70, 0.40, 0.75]),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub kappa: f64,
    pub kappa_spread: f64,
    pub object_min_frac: f64,
    pub object_max_frac: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub families: Vec<String>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn from_section(s: &SynthSection, seed: u64) -> Self {
        Self {
            size: s.size,
            kappa: s.kappa,
            kappa_spread: s.kappa_spread,
            object_min_frac: s.object_min_frac,
            object_max_frac: s.object_max_frac,
            objects_min: s.objects_min,
            objects_max: s.objects_max,
            families: s.families.clone(),
            seed,
        }
    }
}

/// Multi-octave value noise in [0,1], bilinear between lattice points.
fn value_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let octaves: [(usize, f64); 3] = [(4, 0.5), (8, 0.3), (16, 0.2)];
    let mut out = vec![0.0; size * size];
    for &(grid, weight) in &octaves {
        let lattice: Vec<f64> = (0..(grid + 1) * (grid + 1)).map(|_| rng.gen()).collect();
        for y in 0..size {
            for x in 0..size {
                let fx = x as f64 / size as f64 * grid as f64;
                let fy = y as f64 / size as f64 * grid as f64;
                let (x0, y0) = (fx as usize, fy as usize);
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                let g = |yy: usize, xx: usize| lattice[yy * (grid + 1) + xx];
                let v = (1.0 - tx) * (1.0 - ty) * g(y0, x0)
                    + tx * (1.0 - ty) * g(y0, x0 + 1)
                    + (1.0 - tx) * ty * g(y0 + 1, x0)
                    + tx * ty * g(y0 + 1, x0 + 1);
                out[y * size + x] += weight * v;
            }
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &out {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    for v in &mut out {
        *v = (*v - lo) / span;
    }
    out
}

/// Scalar field for one shape family; the mask is its top-area level set.
fn shape_field(family: &str, rng: &mut ChaCha8Rng, size: usize, target_frac: f64) -> Vec<f64> {
    let n = size as f64;
    let cx = rng.gen_range(0.3..0.7) * n;
    let cy = rng.gen_range(0.3..0.7) * n;
    let r0 = (target_frac / std::f64::consts::PI).sqrt() * n;
    let noise = value_noise(rng, size);
    let mut field = vec![0.0; size * size];
    match family {
        "ring" => {
            let width = (0.35 * r0).max(1.5);
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    field[y * size + x] =
                        -((d - 1.3 * r0).abs() / width) + 1.2 * noise[y * size + x];
                }
            }
        }
        "worm" => {
            // Thick strip around a short random walk.
            let segs = 5;
            let mut pts = vec![(cx, cy)];
            let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
            for _ in 0..segs {
                heading += rng.gen_range(-0.9..0.9);
                let (px, py) = *pts.last().unwrap();
                let step = n * 0.12;
                pts.push((
                    (px + step * heading.cos()).clamp(0.0, n - 1.0),
                    (py + step * heading.sin()).clamp(0.0, n - 1.0),
                ));
            }
            let width = (0.5 * r0).max(1.5);
            for y in 0..size {
                for x in 0..size {
                    let mut d = f64::INFINITY;
                    for w in pts.windows(2) {
                        d = d.min(dist_to_segment(x as f64, y as f64, w[0], w[1]));
                    }
                    field[y * size + x] = -(d / width) + 0.8 * noise[y * size + x];
                }
            }
        }
        "star" => {
            let spikes = rng.gen_range(5..9) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    let d = (dx * dx + dy * dy).sqrt();
                    let theta = dy.atan2(dx);
                    let modulated = d * (1.0 + 0.45 * (spikes * theta + phase).cos());
                    field[y * size + x] = -(modulated / r0) + 0.6 * noise[y * size + x];
                }
            }
        }
        // Default family: a wobbly blob.
        _ => {
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    field[y * size + x] = -(d / r0) + 1.0 * noise[y * size + x];
                }
            }
        }
    }
    field
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * vx, ay + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Binary mask as the top `area` pixels of the field (exact pixel count;
/// ties break on index).
fn field_to_mask(field: &[f64], area: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&a, &b| field[b].partial_cmp(&field[a]).unwrap().then(a.cmp(&b)));
    let mut mask = vec![false; field.len()];
    for &i in order.iter().take(area) {
        mask[i] = true;
    }
    mask
}

pub struct GeneratedSample {
    pub rgb: Vec<f64>,
    pub mask: Vec<bool>,
    pub class_word: String,
    pub texture_word: String,
    pub kappa: f64,
}

/// Render one sample; fully determined by (cfg.seed, tag).
pub fn generate_sample(cfg: &SynthConfig, tag: &str) -> GeneratedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tag));
    let size = cfg.size;
    let n = size * size;

    let (texture_word, bg0, bg1) = PALETTES[rng.gen_range(0..PALETTES.len())];
    let bg_noise = value_noise(&mut rng, size);
    let (ob0, ob1) = OBJECT_PALETTES[rng.gen_range(0..OBJECT_PALETTES.len())];
    let obj_noise = value_noise(&mut rng, size);

    let kappa = (cfg.kappa + rng.gen_range(-cfg.kappa_spread..=cfg.kappa_spread)).clamp(0.0, 1.0);
    let family = cfg.families[rng.gen_range(0..cfg.families.len())].clone();
    let count = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let total_frac = rng.gen_range(cfg.object_min_frac..cfg.object_max_frac);

    let mut mask = vec![false; n];
    for _ in 0..count {
        let frac = total_frac / count as f64;
        let field = shape_field(&family, &mut rng, size, frac);
        let area = ((frac * n as f64).round() as usize).max(4);
        for (m, f) in mask.iter_mut().zip(field_to_mask(&field, area)) {
            *m |= f;
        }
    }

    let mut rgb = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            let bg = bg0[c] + (bg1[c] - bg0[c]) * bg_noise[i];
            let v = if mask[i] {
                let obj = ob0[c] + (ob1[c] - ob0[c]) * obj_noise[i];
                kappa * bg + (1.0 - kappa) * obj
            } else {
                bg
            };
            rgb[i * 3 + c] = v.clamp(0.0, 1.0);
        }
    }
    GeneratedSample {
        rgb,
        mask,
        class_word: family,
        texture_word: texture_word.to_string(),
        kappa,
    }
}

fn write_png_rgb(path: &Path, size: usize, rgb: &[f64]) -> Result<()> {
    let buf: Vec<u8> = rgb.iter().map(|&v| (v * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(size as u32, size as u32, buf)
        .expect("buffer matches extent");
    img.save(path).map_err(|e| Error::CorruptImage(e.to_string()))
}

fn write_png_mask(path: &Path, size: usize, mask: &[bool]) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(size as u32, size as u32, buf)
        .expect("buffer matches extent");
    img.save(path).map_err(|e| Error::CorruptImage(e.to_string()))
}

/// Generate the corpus: `n_train` records tagged unlabeled plus
/// `n_test` test records, images and exact masks on disk, manifest
/// returned (not yet saved).
pub fn synth_generate(
    cfg: &SynthConfig,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
    config_hash: &str,
) -> Result<DatasetManifest> {
    if n_train == 0 {
        return Err(Error::ParamRange("need at least one training image".into()));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;

    let mut records = Vec::with_capacity(n_train + n_test);
    for (prefix, count, split) in [
        ("train", n_train, Split::Unlabeled),
        ("test", n_test, Split::Test),
    ] {
        for i in 0..count {
            let id = format!("{prefix}_{i:04}");
            let s = generate_sample(cfg, &id);
            let image_path = images.join(format!("{id}.png"));
            let mask_path = masks.join(format!("{id}.png"));
            write_png_rgb(&image_path, cfg.size, &s.rgb)?;
            write_png_mask(&mask_path, cfg.size, &s.mask)?;
            records.push(Sample {
                id,
                image_path,
                mask_path: Some(mask_path),
                class_word: Some(s.class_word.clone()),
                referring_text: Some(format!(
                    "a {} camouflaged against {} background",
                    s.class_word, s.texture_word
                )),
                split,
            });
        }
    }
    let mut manifest = DatasetManifest::new(cfg.seed, config_hash.to_string(), records)?;
    manifest.meta.generator = Some(serde_json::to_value(cfg)?);
    Ok(manifest)
}
