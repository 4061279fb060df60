//! Image loading, the color/texture/frequency descriptors used by the
//! cold-start clustering, and mask downsampling for attention
//! supervision.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::PredictionMap;
use crate::tensor::{Graph, Tensor};

/// Luma weights for grayscale conversion.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Sobel magnitudes on [0,1] images never exceed 4*sqrt(2).
const SOBEL_MAX: f64 = 5.656_854_249_492_381;

/// In-memory image: interleaved row-major pixels in `[0,1]`, 1 or 3
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ParamRange(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "pixel count {} != {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ParamRange(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Channel value with grayscale images replicated across RGB.
    fn at_rgb(&self, y: usize, x: usize, c: usize) -> f64 {
        if self.channels == 1 {
            self.at(y, x, 0)
        } else {
            self.at(y, x, c)
        }
    }

    pub fn to_gray(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        self.pixels
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()
    }

    /// Planar `[3,H,W]` graph constant (grayscale replicated), the layout
    /// the segmentation network consumes.
    pub fn to_tensor(&self, g: &Graph) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[c * h * w + y * w + x] = self.at_rgb(y, x, c);
                }
            }
        }
        g.constant(data, &[3, h, w])
    }

    /// Area-average resize; exact block means when extents divide evenly.
    pub fn resize_area(&self, h: usize, w: usize) -> Result<Image> {
        if h == self.height && w == self.width {
            return Ok(self.clone());
        }
        let mut pixels = vec![0.0; h * w * self.channels];
        for oy in 0..h {
            let y0 = oy * self.height / h;
            let y1 = ((oy + 1) * self.height).div_ceil(h).max(y0 + 1);
            for ox in 0..w {
                let x0 = ox * self.width / w;
                let x1 = ((ox + 1) * self.width).div_ceil(w).max(x0 + 1);
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += self.at(y, x, c);
                        }
                    }
                    pixels[(oy * w + ox) * self.channels + c] =
                        acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        Image::new(w, h, self.channels, pixels)
    }
}

/// Decode a PNG (8-bit gray or RGB) or PGM/PPM file into `[0,1]` pixels.
pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)
        .map_err(Error::Io)?
        .with_guessed_format()
        .map_err(Error::Io)?;
    match reader.format() {
        Some(image::ImageFormat::Png | image::ImageFormat::Pnm) => {}
        Some(other) => {
            return Err(Error::UnsupportedFormat(format!("{other:?}")));
        }
        None => return Err(Error::CorruptImage("unrecognized header".into())),
    }
    let img = reader
        .decode()
        .map_err(|e| Error::CorruptImage(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(buf) => Image::new(
            w,
            h,
            1,
            buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ),
        image::DynamicImage::ImageRgb8(buf) => Image::new(
            w,
            h,
            3,
            buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ),
        other => {
            // Convert 8-bit variants with alpha or palettes to RGB.
            let rgb = other.to_rgb8();
            Image::new(
                w,
                h,
                3,
                rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            )
        }
    }
}

/// Segment layout of an assembled feature vector.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureLayout {
    pub color_bins: usize,
    pub texture_bins: usize,
    pub frequency_block: usize,
}

impl FeatureLayout {
    pub fn color_len(&self) -> usize {
        3 * self.color_bins
    }

    pub fn texture_len(&self) -> usize {
        self.texture_bins
    }

    pub fn frequency_len(&self) -> usize {
        self.frequency_block * self.frequency_block
    }

    pub fn total_len(&self) -> usize {
        self.color_len() + self.texture_len() + self.frequency_len()
    }
}

/// One image descriptor: `[color | texture | frequency]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: FeatureLayout,
}

/// Per-channel histograms over `bins_per_channel` equal-width bins,
/// concatenated and jointly normalized to sum 1. Grayscale images count
/// as three identical channels.
pub fn color_feature(img: &Image, bins_per_channel: usize) -> Vec<f64> {
    assert!(bins_per_channel >= 2, "need at least 2 bins per channel");
    let mut hist = vec![0.0; 3 * bins_per_channel];
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                let v = img.at_rgb(y, x, c);
                let bin = ((v * bins_per_channel as f64) as usize).min(bins_per_channel - 1);
                hist[c * bins_per_channel + bin] += 1.0;
            }
        }
    }
    let total: f64 = hist.iter().sum();
    for h in &mut hist {
        *h /= total;
    }
    hist
}

/// Sobel gradient magnitudes of the grayscale image over interior
/// pixels, clipped to `[0, 4*sqrt(2)]` and histogrammed into `bins`
/// equal-width bins, normalized to sum 1.
pub fn texture_feature(img: &Image, bins: usize) -> Vec<f64> {
    assert!(bins >= 2, "need at least 2 bins");
    let gray = img.to_gray();
    let (h, w) = (img.height(), img.width());
    let mut hist = vec![0.0; bins];
    if h < 3 || w < 3 {
        hist[0] = 1.0;
        return hist;
    }
    let g = |y: usize, x: usize| gray[y * w + x];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (g(y - 1, x + 1) + 2.0 * g(y, x + 1) + g(y + 1, x + 1))
                - (g(y - 1, x - 1) + 2.0 * g(y, x - 1) + g(y + 1, x - 1));
            let gy = (g(y + 1, x - 1) + 2.0 * g(y + 1, x) + g(y + 1, x + 1))
                - (g(y - 1, x - 1) + 2.0 * g(y - 1, x) + g(y - 1, x + 1));
            let mag = (gx * gx + gy * gy).sqrt().min(SOBEL_MAX);
            let bin = ((mag / SOBEL_MAX * bins as f64) as usize).min(bins - 1);
            hist[bin] += 1.0;
        }
    }
    let total: f64 = hist.iter().sum();
    for v in &mut hist {
        *v /= total;
    }
    hist
}

fn dct_scale(u: usize, n: usize) -> f64 {
    if u == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// Top-left `k x k` block of the orthonormal 2-D type-II DCT of the
/// grayscale image, row-major, unnormalized.
pub fn frequency_feature(img: &Image, k: usize) -> Result<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    if k > h.min(w) {
        return Err(Error::Shape(format!(
            "frequency block {k} exceeds image extent {h}x{w}"
        )));
    }
    let gray = img.to_gray();
    // Rows first, then columns; only the first k frequencies of each.
    let mut rowpass = vec![0.0; k * w];
    for u in 0..k {
        for x in 0..w {
            let mut acc = 0.0;
            for y in 0..h {
                acc += gray[y * w + x]
                    * (std::f64::consts::PI * (2.0 * y as f64 + 1.0) * u as f64 / (2.0 * h as f64))
                        .cos();
            }
            rowpass[u * w + x] = acc;
        }
    }
    let mut out = vec![0.0; k * k];
    for u in 0..k {
        for v in 0..k {
            let mut acc = 0.0;
            for x in 0..w {
                acc += rowpass[u * w + x]
                    * (std::f64::consts::PI * (2.0 * x as f64 + 1.0) * v as f64 / (2.0 * w as f64))
                        .cos();
            }
            out[u * k + v] = dct_scale(u, h) * dct_scale(v, w) * acc;
        }
    }
    Ok(out)
}

/// Feature extraction settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    pub color_bins: usize,
    pub texture_bins: usize,
    pub frequency_block: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            color_bins: 8,
            texture_bins: 16,
            frequency_block: 8,
        }
    }
}

/// Concatenated raw `[color | texture | frequency]` descriptor.
/// Standardization happens per corpus via [`standardize`].
pub fn assemble_features(img: &Image, cfg: &FeatureConfig) -> Result<FeatureVector> {
    let layout = FeatureLayout {
        color_bins: cfg.color_bins,
        texture_bins: cfg.texture_bins,
        frequency_block: cfg.frequency_block,
    };
    let mut values = color_feature(img, cfg.color_bins);
    values.extend(texture_feature(img, cfg.texture_bins));
    values.extend(frequency_feature(img, cfg.frequency_block)?);
    debug_assert_eq!(values.len(), layout.total_len());
    Ok(FeatureVector { values, layout })
}

/// Per-dimension corpus statistics for z-scoring.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CorpusStats {
    /// Single deterministic reduction pass over the corpus, in order.
    pub fn compute(features: &[FeatureVector]) -> CorpusStats {
        let n = features.len().max(1) as f64;
        let dim = features.first().map_or(0, |f| f.values.len());
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(&f.values) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; dim];
        for f in features {
            for (s, (v, m)) in std.iter_mut().zip(f.values.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
        }
        CorpusStats { mean, std }
    }

    /// Z-score a descriptor; zero-variance dimensions map to 0.
    pub fn apply(&self, f: &FeatureVector) -> FeatureVector {
        let values = f
            .values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect();
        FeatureVector {
            values,
            layout: f.layout.clone(),
        }
    }
}

/// Z-score the whole corpus with its own statistics. Returns the
/// standardized vectors and the stats used (recorded in the manifest).
pub fn standardize(features: &[FeatureVector]) -> (Vec<FeatureVector>, CorpusStats) {
    let stats = CorpusStats::compute(features);
    let out = features.iter().map(|f| stats.apply(f)).collect();
    (out, stats)
}

/// Area-average pooling of a mask onto an `h x w` grid. Each output cell
/// averages its partition block, so values stay in `[0,1]` and the
/// global mean is preserved exactly when extents divide evenly.
pub fn downsample_mask(mask: &PredictionMap, h: usize, w: usize) -> Result<PredictionMap> {
    if h == 0 || w == 0 {
        return Err(Error::ParamRange("downsample target extent is zero".into()));
    }
    if h > mask.height() || w > mask.width() {
        return Err(Error::Shape(format!(
            "downsample target {h}x{w} exceeds source {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let (sh, sw) = (mask.height(), mask.width());
    let mut values = vec![0.0; h * w];
    for oy in 0..h {
        let y0 = oy * sh / h;
        let y1 = ((oy + 1) * sh).div_ceil(h).max(y0 + 1);
        for ox in 0..w {
            let x0 = ox * sw / w;
            let x1 = ((ox + 1) * sw).div_ceil(w).max(x0 + 1);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += mask.at(y, x);
                }
            }
            values[oy * w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    PredictionMap::new(h, w, values)
}
