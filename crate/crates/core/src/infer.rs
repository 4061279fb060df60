//! Frozen-weight prediction paths shared by selection scoring and
//! evaluation. When fusion is enabled, each model's own encoder features
//! go through the (shared) text fusion module before decoding.

use crate::augment::AugmenterParams;
use crate::error::Result;
use crate::imgfeat::Image;
use crate::metrics::PredictionMap;
use crate::params::Binding;
use crate::segnet::{mask_to_map, SegModel};
use crate::tensor::{Graph, Tensor};
use crate::tfm::{clue_vector, codebook_similarity, Codebook, TextEmbedder, TfmModule};

/// References to the fusion machinery, when text fusion is enabled.
pub struct FusionRefs<'a> {
    pub tfm: &'a TfmModule,
    pub codebook: &'a Codebook,
    pub embedder: &'a TextEmbedder,
}

/// Byproducts of one fusion pass that the losses consume.
pub struct FusionOutputs {
    pub fused: Vec<Tensor>,
    /// Clue attention row over the top feature's positions, `[1,P]`.
    pub attention: Tensor,
    /// Similarity-weighted codebook aggregation, `[1,d]`.
    pub clue_vector: Tensor,
}

/// Encoder features -> fused features for one model pass.
pub fn fuse_features(
    g: &Graph,
    tfm_binding: &Binding,
    cb_binding: &Binding,
    fusion: &FusionRefs,
    text: &str,
    feats: &[Tensor],
) -> Result<FusionOutputs> {
    let top = feats.last().expect("at least one level");
    let [c, h, w] = top.shape()[..] else { unreachable!() };
    let top_pc = top.reshape(&[c, h * w])?.transpose()?;
    let (attention, clue_q) = fusion.tfm.clue_attention(tfm_binding, &top_pc)?;
    let scores = codebook_similarity(&clue_q, &cb_binding.tensors)?;
    let clue_vector = clue_vector(&scores, &cb_binding.tensors)?;
    let text_vec = g.constant(fusion.embedder.embed(text)?, &[1, fusion.embedder.dim()]);
    let fused = fusion.tfm.fuse(tfm_binding, &text_vec, &clue_vector, feats)?;
    Ok(FusionOutputs {
        fused,
        attention,
        clue_vector,
    })
}

/// Single frozen forward to a prediction map, optionally augmented and
/// optionally text-fused.
pub fn predict(
    model: &SegModel,
    fusion: Option<&FusionRefs>,
    text: &str,
    image: &Image,
    augmenter: Option<&AugmenterParams>,
) -> Result<PredictionMap> {
    let g = Graph::new();
    let mut x = image.to_tensor(&g);
    if let Some(p) = augmenter {
        let pt = p.to_tensors(&g, false);
        x = crate::augment::compose_augment(&x, None, &pt)?.image;
    }
    let b = model.bind(&g, false);
    let feats = model.encode(&b, &x)?;
    let mask = match fusion {
        Some(f) => {
            let tb = f.tfm.bind(&g, false);
            let cb = f.codebook.bind(&g, false);
            let out = fuse_features(&g, &tb, &cb, f, text, &feats)?;
            model.decode(&b, &out.fused)?
        }
        None => model.decode(&b, &feats)?,
    };
    mask_to_map(&mask)
}

/// Teacher and student predictions on the identical augmented input,
/// sharing one graph.
pub fn predict_pair(
    teacher: &SegModel,
    student: &SegModel,
    fusion: Option<&FusionRefs>,
    text: &str,
    image: &Image,
    augmenter: &AugmenterParams,
) -> Result<(PredictionMap, PredictionMap)> {
    let g = Graph::new();
    let x = image.to_tensor(&g);
    let pt = augmenter.to_tensors(&g, false);
    let aug = crate::augment::compose_augment(&x, None, &pt)?;
    let run = |model: &SegModel| -> Result<PredictionMap> {
        let b = model.bind(&g, false);
        let feats = model.encode(&b, &aug.image)?;
        let mask = match fusion {
            Some(f) => {
                let tb = f.tfm.bind(&g, false);
                let cb = f.codebook.bind(&g, false);
                let out = fuse_features(&g, &tb, &cb, f, text, &feats)?;
                model.decode(&b, &out.fused)?
            }
            None => model.decode(&b, &feats)?,
        };
        mask_to_map(&mask)
    };
    Ok((run(teacher)?, run(student)?))
}
