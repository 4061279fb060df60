//! Text fusion: clue attention over the top encoder feature, a
//! class-word codebook queried by cosine similarity, clue-vector
//! aggregation, and hierarchical text-visual cross-attention, plus both
//! fusion losses with labeled/unlabeled gating.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamSet};
use crate::tensor::{loss_bce, loss_mse, Graph, Tensor};

/// Deterministic stand-in for a frozen text encoder: every string maps
/// to a fixed unit-norm vector. Hash mode derives the vector from the
/// text bytes and a seed; table mode looks up precomputed embeddings.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    dim: usize,
    mode: EmbedMode,
}

#[derive(Debug, Clone)]
enum EmbedMode {
    Hash { seed: u64 },
    Table { entries: BTreeMap<String, Vec<f64>> },
}

use crate::util::fnv1a;

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    for x in v {
        *x /= n;
    }
    Ok(())
}

impl TextEmbedder {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            mode: EmbedMode::Hash { seed },
        }
    }

    /// Table mode from `{text: [floats]}` JSON; vectors are normalized
    /// on load.
    pub fn from_table_json(json: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<f64>> = serde_json::from_str(json)?;
        let dim = raw
            .values()
            .next()
            .map(|v| v.len())
            .ok_or_else(|| Error::Config("embedding table is empty".into()))?;
        let mut entries = BTreeMap::new();
        for (k, mut v) in raw {
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "embedding table entry {k:?} has dimension {} != {dim}",
                    v.len()
                )));
            }
            normalize(&mut v)?;
            entries.insert(k, v);
        }
        Ok(Self {
            dim,
            mode: EmbedMode::Table { entries },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Deterministic unit-norm embedding of nonempty text.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::ParamRange("cannot embed empty text".into()));
        }
        match &self.mode {
            EmbedMode::Hash { seed } => {
                let key = fnv1a(text.as_bytes()) ^ seed.rotate_left(17);
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                let mut v: Vec<f64> =
                    (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                normalize(&mut v)?;
                Ok(v)
            }
            EmbedMode::Table { entries } => entries
                .get(text)
                .cloned()
                .ok_or_else(|| Error::UnknownText(text.to_string())),
        }
    }
}

/// Class-word codebook. Entries are trainable parameters, sorted by
/// class word for determinism.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    words: Vec<String>,
    pub params: ParamSet,
    dim: usize,
}

impl Codebook {
    /// One unit-norm entry per distinct class word.
    pub fn init<'a>(
        class_words: impl IntoIterator<Item = &'a str>,
        embedder: &TextEmbedder,
    ) -> Result<Self> {
        let mut words: Vec<String> = class_words.into_iter().map(str::to_string).collect();
        words.sort();
        words.dedup();
        if words.is_empty() {
            return Err(Error::EmptyLabeledSet);
        }
        let mut params = ParamSet::new();
        for w in &words {
            params.add(format!("codebook.{w}"), vec![embedder.dim()], embedder.embed(w)?);
        }
        Ok(Self {
            words,
            params,
            dim: embedder.dim(),
        })
    }

    /// Add entries for class words not yet present (new labels revealed
    /// by a selection round); existing entries keep their trained values.
    pub fn extend_with<'a>(
        &mut self,
        class_words: impl IntoIterator<Item = &'a str>,
        embedder: &TextEmbedder,
    ) -> Result<usize> {
        let mut added = Vec::new();
        for w in class_words {
            if !self.words.iter().any(|x| x == w) && !added.iter().any(|x: &String| x == w) {
                added.push(w.to_string());
            }
        }
        if added.is_empty() {
            return Ok(0);
        }
        let mut all: Vec<String> = self.words.clone();
        all.extend(added.iter().cloned());
        all.sort();
        let mut params = ParamSet::new();
        for w in &all {
            let data = match self.params.index_of(&format!("codebook.{w}")) {
                Some(i) => self.params.get(i).data.clone(),
                None => embedder.embed(w)?,
            };
            params.add(format!("codebook.{w}"), vec![self.dim], data);
        }
        let n = added.len();
        self.words = all;
        self.params = params;
        Ok(n)
    }

    /// Reassemble from pre-built parts (weights deserialization).
    pub(crate) fn from_parts(words: Vec<String>, params: ParamSet, dim: usize) -> Self {
        Self { words, params, dim }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }

    /// `{class_word: [floats]}`, keys in sorted order.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, &[f64]> = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), self.params.get(i).data.as_slice()))
            .collect();
        serde_json::to_string_pretty(&map).expect("codebook serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(json)?;
        let dim = map
            .values()
            .next()
            .map(|v| v.len())
            .ok_or_else(|| Error::EmptyLabeledSet)?;
        let mut params = ParamSet::new();
        let words: Vec<String> = map.keys().cloned().collect();
        for (w, v) in &map {
            if v.len() != dim {
                return Err(Error::Shape(format!("codebook entry {w:?} has wrong dimension")));
            }
            params.add(format!("codebook.{w}"), vec![dim], v.clone());
        }
        Ok(Self { words, params, dim })
    }
}

/// Architecture of the fusion module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfmArch {
    /// Text embedding dimension d.
    pub text_dim: usize,
    /// Attention head dimension d_h (single head).
    pub head_dim: usize,
    /// Channel widths of the hierarchical features, level 0 first.
    pub feature_widths: Vec<usize>,
}

impl TfmArch {
    pub fn top_width(&self) -> usize {
        *self.feature_widths.last().expect("at least one level")
    }
}

/// Learnable fusion parameters: the clue query and its projections, and
/// per-level cross-attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct TfmModule {
    pub arch: TfmArch,
    pub params: ParamSet,
}

impl TfmModule {
    pub fn new(arch: TfmArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut mat = |params: &mut ParamSet, name: String, rows: usize, cols: usize| {
            let a = (1.0 / rows as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
            params.add(name, vec![rows, cols], data);
        };
        mat(&mut params, "clue.q".into(), 1, arch.head_dim);
        mat(&mut params, "clue.wq".into(), arch.head_dim, arch.head_dim);
        mat(&mut params, "clue.wk".into(), arch.top_width(), arch.head_dim);
        mat(&mut params, "clue.wv".into(), arch.top_width(), arch.head_dim);
        for (k, &c) in arch.feature_widths.iter().enumerate() {
            mat(&mut params, format!("fuse{k}.wq"), c, arch.head_dim);
            mat(&mut params, format!("fuse{k}.wk"), arch.text_dim, arch.head_dim);
            mat(&mut params, format!("fuse{k}.wv"), arch.text_dim, arch.head_dim);
            mat(&mut params, format!("fuse{k}.wo"), arch.head_dim, c);
        }
        Self { arch, params }
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }

    fn tensor<'b>(&self, b: &'b Binding, name: &str) -> &'b Tensor {
        &b.tensors[self.params.index_of(name).expect("declared parameter")]
    }

    /// Clue attention over the top-level feature given as
    /// `[positions, channels]`: returns the attention row `A` (`[1,P]`,
    /// a distribution over positions) and the clue query `[1, d_h]`.
    pub fn clue_attention(&self, b: &Binding, top_feature: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.tensor(b, "clue.q").matmul(self.tensor(b, "clue.wq"))?;
        let k = top_feature.matmul(self.tensor(b, "clue.wk"))?;
        let v = top_feature.matmul(self.tensor(b, "clue.wv"))?;
        let scale = 1.0 / (self.arch.head_dim as f64).sqrt();
        let scores = q.matmul(&k.transpose()?)?.mul_scalar(scale);
        let a = scores.softmax(1)?;
        let clue = a.matmul(&v)?;
        Ok((a, clue))
    }

    /// Hierarchical cross-attention fusion. Image positions query the
    /// token stack (text tokens + clue vector); the attended value is
    /// projected back to the feature width and added residually, so
    /// output extents equal input extents at every level.
    pub fn fuse(
        &self,
        b: &Binding,
        text_tokens: &Tensor,
        clue_vector: &Tensor,
        features: &[Tensor],
    ) -> Result<Vec<Tensor>> {
        if text_tokens.shape().last() != Some(&self.arch.text_dim)
            || clue_vector.shape() != [1, self.arch.text_dim]
        {
            return Err(Error::Shape(format!(
                "token dims {:?}/{:?} do not match text_dim {}",
                text_tokens.shape(),
                clue_vector.shape(),
                self.arch.text_dim
            )));
        }
        let tokens = Tensor::concat0(&[text_tokens, clue_vector])?;
        let scale = 1.0 / (self.arch.head_dim as f64).sqrt();
        let mut fused = Vec::with_capacity(features.len());
        for (k, feat) in features.iter().enumerate() {
            let [c, h, w] = feat.shape()[..] else {
                return Err(Error::Shape(format!(
                    "feature {k} must be [C,H,W], got {:?}",
                    feat.shape()
                )));
            };
            if c != self.arch.feature_widths[k] {
                return Err(Error::Shape(format!(
                    "feature {k} has width {c}, arch says {}",
                    self.arch.feature_widths[k]
                )));
            }
            let pc = feat.reshape(&[c, h * w])?.transpose()?;
            let q = pc.matmul(self.tensor(b, &format!("fuse{k}.wq")))?;
            let key = tokens.matmul(self.tensor(b, &format!("fuse{k}.wk")))?;
            let val = tokens.matmul(self.tensor(b, &format!("fuse{k}.wv")))?;
            let a = q.matmul(&key.transpose()?)?.mul_scalar(scale).softmax(1)?;
            let delta = a.matmul(&val)?.matmul(self.tensor(b, &format!("fuse{k}.wo")))?;
            let out = pc.add(&delta)?.transpose()?.reshape(&[c, h, w])?;
            fused.push(out);
        }
        Ok(fused)
    }
}

/// How the attention map is compared against the downsampled mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnLossVariant {
    /// Rescale by the max so supervision targets the attention's shape;
    /// softmax rows cannot otherwise reach a binary target's scale.
    MaxRescaled,
    /// Raw BCE against the softmax output.
    Raw,
}

/// BCE between the attention row and the (already downsampled, flattened)
/// mask target. Both are `[1, P]`.
pub fn attn_supervision_loss(
    a_camo: &Tensor,
    target: &Tensor,
    variant: AttnLossVariant,
) -> Result<Tensor> {
    if a_camo.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "attention {:?} vs target {:?}",
            a_camo.shape(),
            target.shape()
        )));
    }
    match variant {
        AttnLossVariant::MaxRescaled => {
            let rescaled = a_camo.scale_by(&a_camo.max_all().recip_scalar()?)?;
            loss_bce(&rescaled, target)
        }
        AttnLossVariant::Raw => loss_bce(a_camo, target),
    }
}

/// Cosine similarity scores between the clue query and every codebook
/// entry, each kept as a `[1]` tensor so the weighted aggregation can
/// reuse them directly.
pub struct CodebookScores {
    pub weights: Vec<Tensor>,
}

impl CodebookScores {
    /// Concatenated `[K]` view of the scores.
    pub fn as_vector(&self) -> Result<Tensor> {
        let refs: Vec<&Tensor> = self.weights.iter().collect();
        Tensor::concat0(&refs)
    }
}

/// `W_k = cos(Q_CLUE, V_k)` per entry; errors on zero-norm vectors.
pub fn codebook_similarity(qclue: &Tensor, entries: &[Tensor]) -> Result<CodebookScores> {
    let q = qclue.reshape(&[qclue.len()])?;
    let qn = q.norm();
    if qn.scalar_value() == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    let mut weights = Vec::with_capacity(entries.len());
    for v in entries {
        let v = v.reshape(&[v.len()])?;
        let vn = v.norm();
        if vn.scalar_value() == 0.0 {
            return Err(Error::UndefinedSimilarity);
        }
        let cosine = q.dot(&v)?.div(&qn.mul(&vn)?)?;
        weights.push(cosine);
    }
    Ok(CodebookScores { weights })
}

/// `V_CLUE = sum_k W_k * V_k`, an unnormalized weighted sum, as `[1,d]`.
pub fn clue_vector(scores: &CodebookScores, entries: &[Tensor]) -> Result<Tensor> {
    if scores.weights.len() != entries.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} codebook entries",
            scores.weights.len(),
            entries.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (w, v) in scores.weights.iter().zip(entries) {
        let term = v.reshape(&[1, v.len()])?.scale_by(w)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    acc.ok_or(Error::EmptyLabeledSet)
}

/// MSE between the clue vector and the class-word embedding. Labeled
/// data only; the unlabeled path never calls this.
pub fn clue_loss(vclue: &Tensor, class_word: &str, embedder: &TextEmbedder) -> Result<Tensor> {
    let target = vclue
        .graph
        .constant(embedder.embed(class_word)?, &[1, embedder.dim()]);
    loss_mse(vclue, &target)
}

/// `attn_loss + lambda_t * clue_loss`; `lambda_t` must be exactly 0 or 1,
/// and the clue term is required (and only touched) when it is 1.
pub fn tfm_loss(attn_loss: &Tensor, clue: Option<&Tensor>, lambda_t: f64) -> Result<Tensor> {
    if lambda_t == 0.0 {
        Ok(attn_loss.clone())
    } else if lambda_t == 1.0 {
        let c = clue.ok_or_else(|| {
            Error::ParamRange("labeled fusion loss requires a clue term".into())
        })?;
        attn_loss.add(c)
    } else {
        Err(Error::ParamRange(format!(
            "lambda_t must be 0 or 1, got {lambda_t}"
        )))
    }
}

impl Tensor {
    /// `1/x` for a `[1]` tensor, used by the max-rescale.
    fn recip_scalar(&self) -> Result<Tensor> {
        let one = self.graph.scalar(1.0);
        one.div(self)
    }
}

#[cfg(test)]
mod tests;
