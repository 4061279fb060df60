//! Desk-scale encoder/decoder segmentation network. Each encoder level
//! halves the spatial extent; the decoder fuses skip features back up to
//! a full-resolution sigmoid mask. Deliberately tiny so finite-difference
//! checks over whole model paths stay affordable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{compose_augment, AugmenterParams};
use crate::error::{Error, Result};
use crate::imgfeat::Image;
use crate::metrics::PredictionMap;
use crate::params::{Binding, ParamSet};
use crate::tensor::{Graph, Tensor};

/// Architecture descriptor: input channels and encoder widths.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl Default for SegArch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 16, 32],
        }
    }
}

impl SegArch {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.levels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub arch: SegArch,
    pub params: ParamSet,
}

impl SegModel {
    /// Seeded init: conv weights uniform in ±sqrt(1/fan_in), biases zero.
    pub fn new(arch: SegArch, seed: u64) -> Self {
        assert!(arch.levels() >= 2, "need at least two encoder levels");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut conv = |params: &mut ParamSet, name: String, co: usize, ci: usize, k: usize| {
            let a = (1.0 / (ci * k * k) as f64).sqrt();
            let w: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-a..a)).collect();
            params.add(format!("{name}.w"), vec![co, ci, k, k], w);
            params.add(format!("{name}.b"), vec![co], vec![0.0; co]);
        };
        let mut prev = arch.in_channels;
        for (k, &width) in arch.widths.iter().enumerate() {
            conv(&mut params, format!("enc{k}"), width, prev, 3);
            prev = width;
        }
        for k in (0..arch.levels() - 1).rev() {
            let ci = arch.widths[k + 1] + arch.widths[k];
            conv(&mut params, format!("dec{k}"), arch.widths[k], ci, 3);
        }
        conv(&mut params, "head".into(), 1, arch.widths[0], 1);
        SegModel { arch, params }
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }

    fn conv_block(&self, b: &Binding, name: &str, x: &Tensor, pad: usize) -> Result<Tensor> {
        let wi = self
            .params
            .index_of(&format!("{name}.w"))
            .expect("declared parameter");
        let xw = x.conv2d(&b.tensors[wi], 1, pad)?;
        xw.add_channel_bias(&b.tensors[wi + 1])
    }

    fn check_extent(&self, image: &Tensor) -> Result<(usize, usize)> {
        let [c, h, w] = image.shape()[..] else {
            return Err(Error::Shape(format!(
                "image tensor must be [C,H,W], got {:?}",
                image.shape()
            )));
        };
        if c != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.arch.in_channels
            )));
        }
        let f = self.arch.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "input extent {h}x{w} not divisible by {f}"
            )));
        }
        Ok((h, w))
    }

    /// Encoder features, level `k` at extent `H / 2^(k+1)`.
    pub fn encode(&self, b: &Binding, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_extent(image)?;
        let mut feats = Vec::with_capacity(self.arch.levels());
        let mut x = image.clone();
        for k in 0..self.arch.levels() {
            x = self.conv_block(b, &format!("enc{k}"), &x, 1)?.tanh().avg_pool2()?;
            feats.push(x.clone());
        }
        Ok(feats)
    }

    /// Decode (possibly fused) hierarchical features to a sigmoid mask.
    pub fn decode(&self, b: &Binding, feats: &[Tensor]) -> Result<Tensor> {
        if feats.len() != self.arch.levels() {
            return Err(Error::Shape(format!(
                "expected {} feature levels, got {}",
                self.arch.levels(),
                feats.len()
            )));
        }
        let mut d = feats[self.arch.levels() - 1].clone();
        for k in (0..self.arch.levels() - 1).rev() {
            let up = d.upsample_nearest2()?;
            let cat = Tensor::concat0(&[&up, &feats[k]])?;
            d = self.conv_block(b, &format!("dec{k}"), &cat, 1)?.tanh();
        }
        let full = d.upsample_nearest2()?;
        Ok(self.conv_block(b, "head", &full, 0)?.sigmoid())
    }

    /// Full pass: returns the mask and the raw encoder features. When
    /// fused features are supplied the decoder consumes them in place of
    /// the raw ones.
    pub fn forward_with(
        &self,
        b: &Binding,
        image: &Tensor,
        fused: Option<&[Tensor]>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let feats = self.encode(b, image)?;
        let mask = match fused {
            Some(f) => self.decode(b, f)?,
            None => self.decode(b, &feats)?,
        };
        Ok((mask, feats))
    }

    /// Frozen-weight convenience pass.
    pub fn forward(
        &self,
        g: &Graph,
        image: &Tensor,
        fused: Option<&[Tensor]>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let b = self.bind(g, false);
        self.forward_with(&b, image, fused)
    }

    pub fn weights_digest(&self) -> String {
        self.params.digest()
    }
}

/// Teacher/student pair. The teacher is only ever written by
/// [`ema_update`]; no gradient step touches it.
#[derive(Debug, Clone)]
pub struct TeacherStudentPair {
    pub teacher: SegModel,
    pub student: SegModel,
    pub momentum: f64,
}

impl TeacherStudentPair {
    /// Teacher starts as a copy of the student.
    pub fn new(student: SegModel, momentum: f64) -> Self {
        Self {
            teacher: student.clone(),
            student,
            momentum,
        }
    }
}

/// `teacher <- m*teacher + (1-m)*student` over all weights.
pub fn ema_update(pair: &mut TeacherStudentPair, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::ParamRange(format!("EMA momentum {m} outside [0,1)")));
    }
    pair.teacher.params.ema_from(&pair.student.params, m)
}

/// Teacher prediction on the augmented image; no gradients recorded.
pub fn pseudo_label(
    teacher: &SegModel,
    image: &Image,
    augmenter: &AugmenterParams,
) -> Result<PredictionMap> {
    let g = Graph::new();
    let x = image.to_tensor(&g);
    let pt = augmenter.to_tensors(&g, false);
    let aug = compose_augment(&x, None, &pt)?;
    let (mask, _) = teacher.forward(&g, &aug.image, None)?;
    let [_, h, w] = mask.shape()[..] else {
        unreachable!()
    };
    PredictionMap::new(h, w, mask.value())
}

/// Extract a prediction map from a `[1,H,W]` sigmoid mask tensor.
pub fn mask_to_map(mask: &Tensor) -> Result<PredictionMap> {
    let [_, h, w] = mask.shape()[..] else {
        return Err(Error::Shape(format!(
            "mask tensor must be [1,H,W], got {:?}",
            mask.shape()
        )));
    };
    PredictionMap::new(h, w, mask.value())
}
