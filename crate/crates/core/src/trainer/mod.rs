//! The phased semi-supervised loop: cold start, supervised pretraining,
//! adaptive selection, then joint training over labeled and remaining
//! data with alternating student/augmenter/teacher updates.

mod adam;
mod losses;
mod record;

pub use adam::AdamState;
pub use losses::{seg_loss, total_loss, SegLossCfg};
pub use record::{ColdStartLog, EpochLog, PhaseLog, RunRecord, SelectionLog};

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adas::{self, ScoringModels, SelectMode};
use crate::augment::{self, AugmenterParams, ParamBounds};
use crate::config::{
    Config, EvalModel, EvalText, InitMode, PseudoLabelMode, SelectionModeKey,
};
use crate::error::{Error, Result};
use crate::imgfeat::{self, load_image, FeatureConfig, Image};
use crate::infer::{fuse_features, predict, FusionRefs};
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{self, MetricReport, PredictionMap};
use crate::params::Binding;
use crate::segnet::{ema_update, SegArch, SegModel, TeacherStudentPair};
use crate::tensor::{Graph, Tensor};
use crate::tfm::{
    attn_supervision_loss, clue_loss, tfm_loss, Codebook, TextEmbedder, TfmArch, TfmModule,
};
use crate::util::derive_seed;
use crate::weights::Checkpoint;

/// Referring text used for every unlabeled sample.
pub const FIXED_UNLABELED_TEXT: &str = "Camouflaged objects; hidden objects; concealed objects";

/// An image (and optional ground truth) resized to the working extent.
#[derive(Clone)]
struct CachedSample {
    id: String,
    image: Image,
    mask: Option<PredictionMap>,
    class_word: Option<String>,
    text: String,
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

struct LossParts {
    total: Tensor,
    seg: f64,
    aug: f64,
    tfm: f64,
}

/// Multi-step decay: x0.1 after 2/3 of the epochs, x0.01 after 5/6.
fn lr_factor(epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let m1 = total * 2 / 3;
    let m2 = total * 5 / 6;
    let mut f = 1.0;
    if epoch >= m1 {
        f *= 0.1;
    }
    if epoch >= m2 {
        f *= 0.1;
    }
    f
}

pub struct Trainer {
    cfg: Config,
    extent: usize,
    pair: TeacherStudentPair,
    tfm: Option<TfmModule>,
    codebook: Option<Codebook>,
    embedder: TextEmbedder,
    augmenter: AugmenterParams,
    bounds: ParamBounds,
    adam_student: AdamState,
    adam_tfm: Option<AdamState>,
    adam_codebook: Option<AdamState>,
    cache: Arc<HashMap<String, CachedSample>>,
    record: RunRecord,
    iteration: usize,
}

impl Trainer {
    fn attach_phase(&self, phase: &str, epoch: usize, e: Error) -> Error {
        Error::Phase {
            phase: phase.to_string(),
            epoch,
            iteration: self.iteration,
            source: Box::new(e),
        }
    }

    fn seg_cfg(&self) -> SegLossCfg {
        SegLossCfg::from(&self.cfg.train)
    }

    fn fusion_refs(&self) -> Option<FusionRefs<'_>> {
        match (&self.tfm, &self.codebook) {
            (Some(tfm), Some(codebook)) => Some(FusionRefs {
                tfm,
                codebook,
                embedder: &self.embedder,
            }),
            _ => None,
        }
    }

    fn load_cache(&mut self, manifest: &DatasetManifest) -> Result<()> {
        let extent = self.extent;
        let loaded: Vec<CachedSample> = manifest
            .records
            .par_iter()
            .map(|rec| -> Result<CachedSample> {
                let image = load_image(&rec.image_path)?.resize_area(extent, extent)?;
                let mask = match &rec.mask_path {
                    Some(p) => {
                        let m = load_image(p)?.resize_area(extent, extent)?;
                        Some(
                            PredictionMap::new(extent, extent, m.to_gray())?.binarize(0.5),
                        )
                    }
                    None => None,
                };
                Ok(CachedSample {
                    id: rec.id.clone(),
                    image,
                    mask,
                    class_word: rec.class_word.clone(),
                    text: rec
                        .referring_text
                        .clone()
                        .unwrap_or_else(|| FIXED_UNLABELED_TEXT.to_string()),
                })
            })
            .collect::<Result<_>>()?;
        self.cache = Arc::new(loaded.into_iter().map(|s| (s.id.clone(), s)).collect());
        Ok(())
    }

    fn samples(&self, manifest: &DatasetManifest, split: Split) -> Vec<&CachedSample> {
        manifest
            .by_split(split)
            .into_iter()
            .map(|r| &self.cache[&r.id])
            .collect()
    }

    /// Bind everything trainable on a fresh graph.
    fn bindings(&self, g: &Graph) -> (Binding, Option<Binding>, Option<Binding>) {
        let student_b = self.pair.student.bind(g, true);
        let tfm_b = self.tfm.as_ref().map(|t| t.bind(g, true));
        let cb_b = self
            .codebook
            .as_ref()
            .map(|c| c.bind(g, !self.cfg.train.freeze_codebook));
        (student_b, tfm_b, cb_b)
    }

    /// Student forward with optional fusion; returns the prediction and
    /// the fusion byproducts needed for the losses.
    #[allow(clippy::too_many_arguments)]
    fn student_forward(
        &self,
        g: &Graph,
        student_b: &Binding,
        tfm_b: Option<&Binding>,
        cb_b: Option<&Binding>,
        image: &Tensor,
        text: &str,
    ) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
        let feats = self.pair.student.encode(student_b, image)?;
        match (&self.tfm, tfm_b, cb_b) {
            (Some(tfm), Some(tb), Some(cb)) => {
                let refs = FusionRefs {
                    tfm,
                    codebook: self.codebook.as_ref().expect("codebook with tfm"),
                    embedder: &self.embedder,
                };
                let out = fuse_features(g, tb, cb, &refs, text, &feats)?;
                let pred = self.pair.student.decode(student_b, &out.fused)?;
                Ok((pred, Some((out.attention, out.clue_vector))))
            }
            _ => {
                let pred = self.pair.student.decode(student_b, &feats)?;
                Ok((pred, None))
            }
        }
    }

    /// Downsampled, flattened attention target from a mask tensor's
    /// values (constant in the graph).
    fn attention_target(&self, g: &Graph, mask_values: &[f64]) -> Result<Tensor> {
        let side = self.extent >> self.cfg.model.widths.len();
        let full = PredictionMap::new(
            self.extent,
            self.extent,
            mask_values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )?;
        let down = imgfeat::downsample_mask(&full, side, side)?;
        Ok(g.constant(down.values().to_vec(), &[1, side * side]))
    }

    /// Supervised composite over one labeled batch: segmentation loss on
    /// the co-warped ground truth, the fusion losses with the clue term
    /// active, and the (gradient-detached) adversarial value.
    fn supervised_batch(
        &self,
        g: &Graph,
        student_b: &Binding,
        tfm_b: Option<&Binding>,
        cb_b: Option<&Binding>,
        teacher_b: &Binding,
        items: &[&CachedSample],
        applied: &AugmenterParams,
        with_adversarial: bool,
    ) -> Result<LossParts> {
        let pt = applied.to_tensors(g, false);
        let mut total: Option<Tensor> = None;
        let mut seg_sum = 0.0;
        let mut aug_sum = 0.0;
        let mut tfm_sum = 0.0;
        for item in items {
            let mask = item.mask.as_ref().ok_or_else(|| {
                Error::BadManifest(format!("labeled sample {:?} has no mask", item.id))
            })?;
            let x = item.image.to_tensor(g);
            let m = g.constant(mask.values().to_vec(), &[1, self.extent, self.extent]);
            let (input, target) = if self.cfg.train.ada_enabled {
                let aug = augment::compose_augment_bounded(&x, Some(&m), &pt, &self.bounds)?;
                (aug.image, aug.mask.expect("mask warped alongside"))
            } else {
                (x, m)
            };
            let (pred, fusion_out) =
                self.student_forward(g, student_b, tfm_b, cb_b, &input, &item.text)?;
            let seg = seg_loss(g, &pred, &target, self.seg_cfg())?;
            seg_sum += seg.scalar_value();
            let mut item_total = seg;

            if let Some((attention, vclue)) = fusion_out {
                let target_a = self.attention_target(g, &target.value())?;
                let attn =
                    attn_supervision_loss(&attention, &target_a, losses::attn_variant(self.cfg.train.attn_loss))?;
                let word = item.class_word.as_deref().ok_or_else(|| {
                    Error::BadManifest(format!("labeled sample {:?} has no class word", item.id))
                })?;
                let clue = clue_loss(&vclue, word, &self.embedder)?;
                let t = tfm_loss(&attn, Some(&clue), 1.0)?;
                tfm_sum += t.scalar_value();
                item_total = item_total.add(&t)?;
            }

            if with_adversarial {
                // Adversarial value: contributes to the reported loss
                // but routes no gradients into the student here.
                let (t_pred, _) = self.pair.teacher.forward_with(teacher_b, &input, None)?;
                let a = augment::aug_loss(&t_pred, &pred.detach(), &target)?;
                aug_sum += a.scalar_value();
                item_total = item_total.add(&a)?;
            }
            total = Some(match total {
                Some(acc) => acc.add(&item_total)?,
                None => item_total,
            });
        }
        let n = items.len().max(1) as f64;
        let total = total
            .ok_or_else(|| Error::ParamRange("empty labeled batch".into()))?
            .mul_scalar(1.0 / n);
        Ok(LossParts {
            total,
            seg: seg_sum / n,
            aug: aug_sum / n,
            tfm: tfm_sum / n,
        })
    }

    /// Unsupervised composite over one unlabeled batch: segmentation
    /// against the teacher's pseudo-label, attention supervised by the
    /// downsampled pseudo-label, no clue term, no adversarial term.
    fn unsupervised_batch(
        &self,
        g: &Graph,
        student_b: &Binding,
        tfm_b: Option<&Binding>,
        cb_b: Option<&Binding>,
        items: &[&CachedSample],
        applied: &AugmenterParams,
    ) -> Result<LossParts> {
        let pt = applied.to_tensors(g, false);
        let mut total: Option<Tensor> = None;
        let mut seg_sum = 0.0;
        let mut tfm_sum = 0.0;
        for item in items {
            // Pseudo-label on its own graph: a detached constant target.
            let pseudo = predict(
                &self.pair.teacher,
                self.fusion_refs().as_ref(),
                FIXED_UNLABELED_TEXT,
                &item.image,
                self.cfg.train.ada_enabled.then_some(applied),
            )?;
            let pseudo = match self.cfg.train.pseudo_label {
                PseudoLabelMode::Soft => pseudo,
                PseudoLabelMode::Threshold => pseudo.binarize(self.cfg.train.pseudo_threshold),
            };

            let x = item.image.to_tensor(g);
            let input = if self.cfg.train.ada_enabled {
                augment::compose_augment_bounded(&x, None, &pt, &self.bounds)?.image
            } else {
                x
            };
            let (pred, fusion_out) =
                self.student_forward(g, student_b, tfm_b, cb_b, &input, FIXED_UNLABELED_TEXT)?;
            let target = g.constant(
                pseudo.values().to_vec(),
                &[1, self.extent, self.extent],
            );
            let seg = seg_loss(g, &pred, &target, self.seg_cfg())?;
            seg_sum += seg.scalar_value();
            let mut item_total = seg;
            if let Some((attention, _vclue)) = fusion_out {
                let target_a = self.attention_target(g, pseudo.values())?;
                let attn = attn_supervision_loss(
                    &attention,
                    &target_a,
                    losses::attn_variant(self.cfg.train.attn_loss),
                )?;
                let t = tfm_loss(&attn, None, 0.0)?;
                tfm_sum += t.scalar_value();
                item_total = item_total.add(&t)?;
            }
            total = Some(match total {
                Some(acc) => acc.add(&item_total)?,
                None => item_total,
            });
        }
        let n = items.len().max(1) as f64;
        let total = total
            .ok_or_else(|| Error::ParamRange("empty unlabeled batch".into()))?
            .mul_scalar(1.0 / n);
        Ok(LossParts {
            total,
            seg: seg_sum / n,
            aug: 0.0,
            tfm: tfm_sum / n,
        })
    }

    /// One optimizer iteration: student(+fusion) step, augmenter step,
    /// then the EMA teacher update.
    fn iterate(
        &mut self,
        labeled: &[&CachedSample],
        unlabeled: &[&CachedSample],
        applied: &AugmenterParams,
        lr: f64,
        lr_fac: f64,
        lambda_u: f64,
    ) -> Result<(f64, f64, f64, f64, f64)> {
        let g = Graph::new();
        let (student_b, tfm_b, cb_b) = self.bindings(&g);
        let teacher_b = self.pair.teacher.bind(&g, false);
        let sup = self.supervised_batch(
            &g,
            &student_b,
            tfm_b.as_ref(),
            cb_b.as_ref(),
            &teacher_b,
            labeled,
            applied,
            self.cfg.train.ada_enabled,
        )?;
        let (loss, unsup_value) = if unlabeled.is_empty() {
            (sup.total.clone(), 0.0)
        } else {
            let unsup = self.unsupervised_batch(
                &g,
                &student_b,
                tfm_b.as_ref(),
                cb_b.as_ref(),
                unlabeled,
                applied,
            )?;
            let value = unsup.total.scalar_value();
            (total_loss(&sup.total, &unsup.total, lambda_u)?, value)
        };
        let loss_value = loss.scalar_value();
        loss.backward()?;

        let grads = student_b
            .gradients()
            .ok_or(Error::NonFiniteGradient)?;
        self.adam_student
            .step(&mut self.pair.student.params, &grads, lr)?;
        if let (Some(tfm), Some(tb), Some(adam)) =
            (self.tfm.as_mut(), tfm_b.as_ref(), self.adam_tfm.as_mut())
        {
            let grads = tb.gradients().ok_or(Error::NonFiniteGradient)?;
            adam.step(&mut tfm.params, &grads, lr)?;
        }
        if !self.cfg.train.freeze_codebook {
            if let (Some(cb), Some(cbb), Some(adam)) = (
                self.codebook.as_mut(),
                cb_b.as_ref(),
                self.adam_codebook.as_mut(),
            ) {
                let grads = cbb.gradients().ok_or(Error::NonFiniteGradient)?;
                adam.step(&mut cb.params, &grads, lr)?;
            }
        }

        if self.cfg.train.ada_enabled {
            let batch: Vec<(Vec<f64>, Vec<f64>)> = labeled
                .iter()
                .filter_map(|s| {
                    s.mask.as_ref().map(|m| {
                        (
                            image_chw(&s.image),
                            m.values().to_vec(),
                        )
                    })
                })
                .collect();
            if !batch.is_empty() {
                augment::augmenter_step(
                    &mut self.augmenter,
                    &batch,
                    (self.extent, self.extent),
                    &self.pair.teacher,
                    &self.pair.student,
                    self.cfg.train.lr_augmenter * lr_fac,
                    &self.bounds,
                )?;
            }
        }

        ema_update(&mut self.pair, self.cfg.train.ema_momentum)?;
        self.iteration += 1;
        self.record.iteration_loss.push(loss_value);
        Ok((loss_value, sup.seg, sup.aug, sup.tfm, unsup_value))
    }

    fn evaluate_split(&self, manifest: &DatasetManifest, split: Split) -> Result<Option<MetricReport>> {
        let samples = self.samples(manifest, split);
        if samples.is_empty() {
            return Ok(None);
        }
        let model = match self.cfg.train.eval_model {
            EvalModel::Student => &self.pair.student,
            EvalModel::Teacher => &self.pair.teacher,
        };
        let fusion = self.fusion_refs();
        let reports: Vec<MetricReport> = samples
            .par_iter()
            .map(|s| -> Result<MetricReport> {
                let gt = s.mask.as_ref().ok_or_else(|| {
                    Error::EmptySplit(format!("{split} sample {} has no mask", s.id))
                })?;
                let text = match self.cfg.train.eval_text {
                    EvalText::Precise => s.text.as_str(),
                    EvalText::Fixed => FIXED_UNLABELED_TEXT,
                };
                let pred = predict(model, fusion.as_ref(), text, &s.image, None)?;
                metrics::evaluate(&pred, gt)
            })
            .collect::<Result<_>>()?;
        Ok(Some(MetricReport::mean_of(&reports)))
    }

    /// One epoch over the given batch schedule.
    #[allow(clippy::too_many_arguments)]
    fn run_epoch(
        &mut self,
        manifest: &DatasetManifest,
        phase: &str,
        epoch: usize,
        total_epochs: usize,
        with_unlabeled: bool,
    ) -> Result<usize> {
        let seed = self.cfg.run.seed;
        let mut rng_l =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle/{phase}/{epoch}/l")));
        let mut labeled_ids: Vec<String> = manifest
            .by_split(Split::Labeled)
            .iter()
            .map(|r| r.id.clone())
            .collect();
        labeled_ids.shuffle(&mut rng_l);
        let labeled_batches: Vec<Vec<String>> = labeled_ids
            .chunks(self.cfg.train.batch_labeled.max(1))
            .map(|c| c.to_vec())
            .collect();
        if labeled_batches.is_empty() {
            return Err(Error::EmptySplit("labeled".into()));
        }

        let unlabeled_batches: Vec<Vec<String>> = if with_unlabeled {
            let mut rng_u = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &format!("shuffle/{phase}/{epoch}/u"),
            ));
            let mut ids: Vec<String> = manifest
                .by_split(Split::Remaining)
                .iter()
                .map(|r| r.id.clone())
                .collect();
            ids.shuffle(&mut rng_u);
            ids.chunks(self.cfg.train.batch_unlabeled.max(1))
                .map(|c| c.to_vec())
                .collect()
        } else {
            Vec::new()
        };

        let applied = if self.cfg.train.ada_enabled {
            self.augmenter.jittered(
                self.cfg.train.jitter_sigma,
                derive_seed(seed, &format!("jitter/{phase}/{epoch}")),
                &self.bounds,
            )
        } else {
            AugmenterParams::identity()
        };

        let lr = self.cfg.train.lr * lr_factor(epoch, total_epochs);
        let lambda_u = self.effective_lambda(phase, epoch);
        let iterations = if unlabeled_batches.is_empty() {
            labeled_batches.len()
        } else {
            unlabeled_batches.len()
        };

        let mut sums = [0.0; 5];
        let cache = Arc::clone(&self.cache);
        for i in 0..iterations {
            let lb: Vec<&CachedSample> = labeled_batches[i % labeled_batches.len()]
                .iter()
                .map(|id| &cache[id])
                .collect();
            let ub: Vec<&CachedSample> = if unlabeled_batches.is_empty() {
                Vec::new()
            } else {
                unlabeled_batches[i]
                    .iter()
                    .map(|id| &cache[id])
                    .collect()
            };
            let fac = lr_factor(epoch, total_epochs);
            let (total, seg, aug, tfm, unsup) =
                self.iterate(&lb, &ub, &applied, lr, fac, lambda_u)?;
            sums[0] += total;
            sums[1] += seg;
            sums[2] += aug;
            sums[3] += tfm;
            sums[4] += unsup;
        }

        let n = iterations.max(1) as f64;
        let test = if self.cfg.train.eval_every > 0
            && (epoch % self.cfg.train.eval_every == 0 || epoch + 1 == total_epochs)
        {
            self.evaluate_split(manifest, Split::Test)?
        } else {
            None
        };
        self.record.epoch_log.push(EpochLog {
            phase: phase.to_string(),
            epoch,
            lr_factor: lr_factor(epoch, total_epochs),
            lambda_u,
            loss_total: sums[0] / n,
            loss_seg: sums[1] / n,
            loss_aug: sums[2] / n,
            loss_tfm: sums[3] / n,
            loss_unsup: sums[4] / n,
            test,
        });
        Ok(iterations)
    }

    fn effective_lambda(&self, phase: &str, epoch: usize) -> f64 {
        if phase != "joint" {
            return self.cfg.train.lambda_u;
        }
        if !self.cfg.train.lambda_u_ramp {
            return self.cfg.train.lambda_u;
        }
        let ramp = (self.cfg.train.joint_epochs as f64 * 0.2).ceil().max(1.0);
        self.cfg.train.lambda_u * ((epoch + 1) as f64 / ramp).min(1.0)
    }
}

fn image_chw(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = if img.channels() == 1 {
                    img.at(y, x, 0)
                } else {
                    img.at(y, x, c)
                };
                data[c * h * w + y * w + x] = v;
            }
        }
    }
    data
}

/// Cold-start selection: k-means over standardized image descriptors
/// (or a seeded random draw), revealing the chosen annotations.
fn cold_start(cfg: &Config, manifest: &mut DatasetManifest, budget: usize) -> Result<ColdStartLog> {
    let unlabeled: Vec<String> = manifest
        .by_split(Split::Unlabeled)
        .iter()
        .map(|r| r.id.clone())
        .collect();
    if unlabeled.is_empty() {
        return Err(Error::EmptySplit("unlabeled".into()));
    }
    let budget = budget.min(unlabeled.len());
    let (method, chosen) = match cfg.select.init {
        InitMode::Random => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.run.seed, "cold_start/random"));
            let mut ids = unlabeled.clone();
            ids.shuffle(&mut rng);
            ids.truncate(budget);
            ("random".to_string(), ids)
        }
        InitMode::Kmeans => {
            let res = cfg.features.resolution;
            let fc = FeatureConfig {
                color_bins: cfg.features.color_bins,
                texture_bins: cfg.features.texture_bins,
                frequency_block: cfg.features.frequency_block,
            };
            let records = manifest.by_split(Split::Unlabeled);
            let feats: Vec<imgfeat::FeatureVector> = records
                .par_iter()
                .map(|r| -> Result<imgfeat::FeatureVector> {
                    let img = load_image(&r.image_path)?.resize_area(res, res)?;
                    imgfeat::assemble_features(&img, &fc)
                })
                .collect::<Result<_>>()?;
            let (standardized, stats) = imgfeat::standardize(&feats);
            let layout = standardized[0].layout.clone();
            manifest.meta.corpus_stats = Some(crate::manifest::CorpusStatsRecord {
                stats,
                layout,
                feature_resolution: res,
            });
            let idx = adas::kmeans_init(
                &standardized,
                budget,
                derive_seed(cfg.run.seed, "cold_start/kmeans"),
            )?;
            (
                "kmeans".to_string(),
                idx.into_iter().map(|i| unlabeled[i].clone()).collect(),
            )
        }
    };
    manifest.set_split(&chosen, Split::Labeled, "init-select", &method)?;
    Ok(ColdStartLog {
        method,
        budget,
        selected: chosen,
    })
}

/// Run the full pipeline on a manifest (mutated in place: splits flip as
/// annotations are revealed). Deterministic for a fixed seed and
/// manifest.
pub fn train_run(cfg: &Config, manifest: &mut DatasetManifest) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.run.seed;
    let arch = SegArch {
        in_channels: 3,
        widths: cfg.model.widths.clone(),
    };
    let student = SegModel::new(arch.clone(), derive_seed(seed, "model"));
    let pair = TeacherStudentPair::new(student, cfg.train.ema_momentum);
    let embedder = TextEmbedder::hashed(cfg.model.text_dim, derive_seed(seed, "embedder"));

    let mut trainer = Trainer {
        adam_student: AdamState::new_like(&pair.student.params),
        extent: cfg.train.resolution,
        pair,
        tfm: None,
        codebook: None,
        embedder,
        augmenter: AugmenterParams::identity(),
        bounds: ParamBounds::default(),
        adam_tfm: None,
        adam_codebook: None,
        cache: Arc::new(HashMap::new()),
        record: RunRecord {
            seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            phases: Vec::new(),
            cold_start: None,
            selection_rounds: Vec::new(),
            epoch_log: Vec::new(),
            iteration_loss: Vec::new(),
            label_cost: 0,
            augmenter: AugmenterParams::identity(),
            weight_checksum: String::new(),
            final_test: None,
        },
        iteration: 0,
        cfg: cfg.clone(),
    };

    // Phase 1: cold start. Half the budget seeds the labeled set; the
    // rest goes to the selection round(s).
    let budget = cfg.select.budget;
    let already_labeled = manifest.split_counts()[0];
    let (cold_budget, round_budget) = if already_labeled > 0 {
        (0, budget)
    } else {
        (budget.div_ceil(2), budget / 2)
    };
    if cold_budget > 0 {
        let log = cold_start(cfg, manifest, cold_budget)
            .map_err(|e| trainer.attach_phase("cold_start", 0, e))?;
        trainer.record.cold_start = Some(log);
    }
    trainer.record.phases.push(PhaseLog {
        name: "cold_start".into(),
        epochs: 0,
        iterations: 0,
        start_iteration: 0,
    });

    // Fusion machinery needs the labeled class words.
    if cfg.train.tfm_enabled {
        let words: Vec<String> = manifest
            .by_split(Split::Labeled)
            .iter()
            .filter_map(|r| r.class_word.clone())
            .collect();
        let codebook = Codebook::init(words.iter().map(|s| s.as_str()), &trainer.embedder)
            .map_err(|e| trainer.attach_phase("cold_start", 0, e))?;
        let tfm = TfmModule::new(
            TfmArch {
                text_dim: cfg.model.text_dim,
                head_dim: cfg.model.head_dim,
                feature_widths: cfg.model.widths.clone(),
            },
            derive_seed(seed, "tfm"),
        );
        trainer.adam_tfm = Some(AdamState::new_like(&tfm.params));
        trainer.adam_codebook = Some(AdamState::new_like(&codebook.params));
        trainer.tfm = Some(tfm);
        trainer.codebook = Some(codebook);
    }

    trainer.load_cache(manifest)?;

    // Phase 2: supervised pretraining on the cold-start labels.
    let start = trainer.iteration;
    let mut pre_iters = 0;
    for epoch in 0..cfg.train.pretrain_epochs {
        pre_iters += trainer
            .run_epoch(manifest, "pretrain", epoch, cfg.train.pretrain_epochs, false)
            .map_err(|e| trainer.attach_phase("pretrain", epoch, e))?;
    }
    trainer.record.phases.push(PhaseLog {
        name: "pretrain".into(),
        epochs: cfg.train.pretrain_epochs,
        iterations: pre_iters,
        start_iteration: start,
    });

    // Phase 3: adaptive selection round(s).
    if round_budget > 0 {
        for round in 0..cfg.select.rounds {
            let share = round_budget / cfg.select.rounds
                + usize::from(round < round_budget % cfg.select.rounds);
            if share == 0 {
                continue;
            }
            let log = run_selection_phase(cfg, manifest, &trainer, round, share)
                .map_err(|e| trainer.attach_phase("selection", round, e))?;
            trainer.record.selection_rounds.push(log);
        }
    }
    // Whatever is still unlabeled forms the remaining set.
    let residual: Vec<String> = manifest
        .by_split(Split::Unlabeled)
        .iter()
        .map(|r| r.id.clone())
        .collect();
    if !residual.is_empty() {
        manifest.set_split(&residual, Split::Remaining, "selection", "residual")?;
    }
    // New labels can carry new class words.
    if let Some(cb) = trainer.codebook.as_mut() {
        let words: Vec<String> = manifest
            .by_split(Split::Labeled)
            .iter()
            .filter_map(|r| r.class_word.clone())
            .collect();
        let added = cb.extend_with(words.iter().map(|s| s.as_str()), &trainer.embedder)?;
        if added > 0 {
            trainer.adam_codebook = Some(AdamState::new_like(&cb.params));
        }
    }
    trainer.record.phases.push(PhaseLog {
        name: "selection".into(),
        epochs: 0,
        iterations: 0,
        start_iteration: trainer.iteration,
    });

    // Phase 4: joint training over labeled and remaining data.
    let start = trainer.iteration;
    let mut joint_iters = 0;
    for epoch in 0..cfg.train.joint_epochs {
        joint_iters += trainer
            .run_epoch(manifest, "joint", epoch, cfg.train.joint_epochs, true)
            .map_err(|e| trainer.attach_phase("joint", epoch, e))?;
    }
    trainer.record.phases.push(PhaseLog {
        name: "joint".into(),
        epochs: cfg.train.joint_epochs,
        iterations: joint_iters,
        start_iteration: start,
    });

    // Final evaluation and record assembly.
    trainer.record.final_test = trainer.evaluate_split(manifest, Split::Test)?;
    trainer.record.label_cost = manifest.meta.revealed;
    trainer.record.augmenter = trainer.augmenter;
    let checkpoint = Checkpoint {
        seed,
        config_hash: cfg.hash(),
        teacher: trainer.pair.teacher.clone(),
        student: trainer.pair.student.clone(),
        tfm: trainer.tfm.clone(),
        codebook: trainer.codebook.clone(),
        augmenter: trainer.augmenter,
    };
    trainer.record.weight_checksum = checkpoint_digest(&checkpoint);
    Ok(TrainOutcome {
        record: trainer.record,
        checkpoint,
    })
}

/// SHA-256 over all weight sections in declaration order.
pub fn checkpoint_digest(c: &Checkpoint) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(c.teacher.params.to_bytes());
    h.update(c.student.params.to_bytes());
    if let Some(t) = &c.tfm {
        h.update(t.params.to_bytes());
    }
    if let Some(cb) = &c.codebook {
        h.update(cb.params.to_bytes());
    }
    hex::encode(h.finalize())
}

fn run_selection_phase(
    cfg: &Config,
    manifest: &mut DatasetManifest,
    trainer: &Trainer,
    round: usize,
    budget: usize,
) -> Result<SelectionLog> {
    let is_last = round + 1 == cfg.select.rounds;
    match cfg.select.mode {
        SelectionModeKey::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.run.seed,
                &format!("selection/random/{round}"),
            ));
            let mut ids: Vec<String> = manifest
                .by_split(Split::Unlabeled)
                .iter()
                .map(|r| r.id.clone())
                .collect();
            ids.shuffle(&mut rng);
            let selected: Vec<String> = ids.iter().take(budget).cloned().collect();
            manifest.set_split(&selected, Split::Labeled, "select", "random")?;
            if is_last {
                let rest: Vec<String> = ids.into_iter().skip(budget).collect();
                manifest.set_split(&rest, Split::Remaining, "select", "random remaining")?;
            }
            Ok(SelectionLog {
                round,
                mode: "random".into(),
                budget,
                selected,
                degenerate: false,
                reports: Vec::new(),
            })
        }
        key => {
            let mode = match key {
                SelectionModeKey::Center => SelectMode::Center(cfg.select.center),
                SelectionModeKey::TopKEasy => SelectMode::TopKEasy,
                SelectionModeKey::TopKHard => SelectMode::TopKHard,
                SelectionModeKey::Random => unreachable!(),
            };
            let models = ScoringModels {
                teacher: &trainer.pair.teacher,
                student: &trainer.pair.student,
                fusion: trainer.fusion_refs(),
                fixed_text: FIXED_UNLABELED_TEXT,
            };
            let out = adas::run_selection_round(
                manifest,
                &models,
                &trainer.augmenter,
                (trainer.extent, trainer.extent),
                budget,
                mode,
            )?;
            manifest.set_split(
                &out.selection.selected,
                Split::Labeled,
                "select",
                &format!("mode={mode}"),
            )?;
            if is_last {
                manifest.set_split(
                    &out.selection.remaining,
                    Split::Remaining,
                    "select",
                    &format!("mode={mode} remaining"),
                )?;
            }
            Ok(SelectionLog {
                round,
                mode: mode.to_string(),
                budget,
                selected: out.selection.selected,
                degenerate: out.degenerate,
                reports: out.reports,
            })
        }
    }
}
