//! Adaptive data selection: score unlabeled samples by teacher/student
//! disagreement, normalize the scores through a kernel-density CDF, and
//! pick the samples worth annotating. Cold start is handled by k-means
//! over image descriptors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::augment::AugmenterParams;
use crate::error::{Error, Result};
use crate::imgfeat::{load_image, FeatureVector};
use crate::infer::{predict_pair, FusionRefs};
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{self, PredictionMap};
use crate::segnet::SegModel;

/// Per-sample scoring outcome. Ranks are a permutation of `1..=M`
/// (rank 1 = highest normalized score, ties broken by id).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub id: String,
    pub raw_score: f64,
    pub norm_score: f64,
    pub rank: usize,
    pub selected: bool,
}

/// How the sorted scores are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "center")]
pub enum SelectMode {
    /// Take the samples whose normalized score is nearest the center
    /// (default 0.5): partially understood, still informative.
    Center(f64),
    /// Highest scores first: the easiest samples.
    TopKEasy,
    /// Lowest scores first: the hardest samples.
    TopKHard,
}

impl std::fmt::Display for SelectMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectMode::Center(c) => write!(f, "center_{c}"),
            SelectMode::TopKEasy => write!(f, "top_k_easy"),
            SelectMode::TopKHard => write!(f, "top_k_hard"),
        }
    }
}

/// Outcome of one selection: `selected` and `remaining` partition the
/// scored set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<String>,
    pub remaining: Vec<String>,
    pub mode: SelectMode,
}

/// Disagreement score `SSIM(t, s) - MAE(t, s)`; 1 exactly iff the maps
/// are identical, and never below -2.
pub fn score(teacher_pred: &PredictionMap, student_pred: &PredictionMap) -> Result<f64> {
    Ok(metrics::ssim(teacher_pred, student_pred)? - metrics::mae(teacher_pred, student_pred)?)
}

/// KDE-smoothed probability integral transform: each score maps through
/// the Gaussian-kernel CDF of the whole score set, with Silverman's
/// bandwidth. Strictly order-preserving; output in (0,1), approximately
/// uniform when the scores vary.
pub fn kde_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::ParamRange(format!(
            "kde normalization needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().all(|&s| s == scores[0]) {
        return Err(Error::DegenerateScores);
    }
    let m = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / m;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1.0);
    if var == 0.0 {
        return Err(Error::DegenerateScores);
    }
    let h = 1.06 * var.sqrt() * m.powf(-0.2);
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(scores
        .iter()
        .map(|&si| scores.iter().map(|&sj| phi.cdf((si - sj) / h)).sum::<f64>() / m)
        .collect())
}

/// Rank the reports (1 = highest normalized score, ties by id) in place.
fn assign_ranks(reports: &mut [ScoreReport]) {
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        reports[b]
            .norm_score
            .partial_cmp(&reports[a].norm_score)
            .unwrap()
            .then_with(|| reports[a].id.cmp(&reports[b].id))
    });
    for (rank, idx) in order.into_iter().enumerate() {
        reports[idx].rank = rank + 1;
    }
}

/// Select `budget` ids according to `mode`; marks the chosen reports.
/// Ties always break on ascending id, so runs are reproducible.
pub fn select(reports: &mut [ScoreReport], budget: usize, mode: SelectMode) -> SelectionResult {
    let mut order: Vec<usize> = (0..reports.len()).collect();
    match mode {
        SelectMode::Center(c) => order.sort_by(|&a, &b| {
            let da = (reports[a].norm_score - c).abs();
            let db = (reports[b].norm_score - c).abs();
            da.partial_cmp(&db)
                .unwrap()
                .then_with(|| reports[a].id.cmp(&reports[b].id))
        }),
        SelectMode::TopKEasy => order.sort_by(|&a, &b| {
            reports[b]
                .norm_score
                .partial_cmp(&reports[a].norm_score)
                .unwrap()
                .then_with(|| reports[a].id.cmp(&reports[b].id))
        }),
        SelectMode::TopKHard => order.sort_by(|&a, &b| {
            reports[a]
                .norm_score
                .partial_cmp(&reports[b].norm_score)
                .unwrap()
                .then_with(|| reports[a].id.cmp(&reports[b].id))
        }),
    }
    let take = budget.min(reports.len());
    for &idx in order.iter().take(take) {
        reports[idx].selected = true;
    }
    let selected: Vec<String> = order[..take].iter().map(|&i| reports[i].id.clone()).collect();
    let remaining: Vec<String> = reports
        .iter()
        .filter(|r| !r.selected)
        .map(|r| r.id.clone())
        .collect();
    SelectionResult {
        selected,
        remaining,
        mode,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding, Lloyd iterations to convergence (max centroid
/// shift < 1e-6 or 100 rounds), then the sample nearest each final
/// centroid, deduplicated with next-nearest fallback. Returns exactly
/// `k` distinct indices into `features`.
pub fn kmeans_init(features: &[FeatureVector], k: usize, seed: u64) -> Result<Vec<usize>> {
    let m = features.len();
    if m == 0 {
        return Err(Error::ParamRange("k-means over an empty corpus".into()));
    }
    if k > m {
        return Err(Error::ParamRange(format!("k = {k} exceeds corpus size {m}")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let dim = features[0].values.len();
    let data: Vec<&[f64]> = features.iter().map(|f| f.values.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(data[rng.gen_range(0..m)].to_vec());
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.gen_range(0..m)
        };
        centroids.push(data[next].to_vec());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centroids.last().unwrap()));
        }
    }

    // Lloyd iterations.
    let mut assign = vec![0usize; m];
    for _ in 0..100 {
        for (i, x) in data.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d = sq_dist(x, cen);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(data[i]) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            for s in &mut sums[c] {
                *s /= counts[c] as f64;
            }
            shift = shift.max(sq_dist(&sums[c], &centroids[c]).sqrt());
            centroids[c] = std::mem::take(&mut sums[c]);
        }
        if shift < 1e-6 {
            break;
        }
    }

    // Nearest sample per centroid, deduplicated via next-nearest.
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for cen in &centroids {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            sq_dist(data[a], cen)
                .partial_cmp(&sq_dist(data[b], cen))
                .unwrap()
                .then(a.cmp(&b))
        });
        let pick = order
            .into_iter()
            .find(|i| !chosen.contains(i))
            .expect("k <= m leaves a free sample");
        chosen.push(pick);
    }
    Ok(chosen)
}

/// Everything one scoring pass needs besides the manifest.
pub struct ScoringModels<'a> {
    pub teacher: &'a SegModel,
    pub student: &'a SegModel,
    pub fusion: Option<FusionRefs<'a>>,
    /// Referring text used for every unlabeled sample.
    pub fixed_text: &'a str,
}

/// Outcome of a full selection round.
pub struct RoundOutcome {
    pub reports: Vec<ScoreReport>,
    pub selection: SelectionResult,
    /// True when all raw scores were identical and the normalization
    /// fell back to a uniform 0.5.
    pub degenerate: bool,
}

/// Score every unlabeled sample (augment, predict with both models,
/// Eq-3 score), KDE-normalize, and select per `mode`. Deterministic for
/// fixed weights and manifest order.
pub fn run_selection_round(
    manifest: &DatasetManifest,
    models: &ScoringModels,
    augmenter: &AugmenterParams,
    extent: (usize, usize),
    budget: usize,
    mode: SelectMode,
) -> Result<RoundOutcome> {
    let unlabeled = manifest.by_split(Split::Unlabeled);
    let raw: Vec<(String, f64)> = unlabeled
        .par_iter()
        .map(|rec| -> Result<(String, f64)> {
            let img = load_image(&rec.image_path)?.resize_area(extent.0, extent.1)?;
            let (t, s) = predict_pair(
                models.teacher,
                models.student,
                models.fusion.as_ref(),
                models.fixed_text,
                &img,
                augmenter,
            )?;
            Ok((rec.id.clone(), score(&t, &s)?))
        })
        .collect::<Result<_>>()?;

    let scores: Vec<f64> = raw.iter().map(|(_, s)| *s).collect();
    let (normalized, degenerate) = match kde_normalize(&scores) {
        Ok(n) => (n, false),
        Err(Error::DegenerateScores) => (vec![0.5; scores.len()], true),
        Err(e) => return Err(e),
    };

    let mut reports: Vec<ScoreReport> = raw
        .into_iter()
        .zip(normalized)
        .map(|((id, raw_score), norm_score)| ScoreReport {
            id,
            raw_score,
            norm_score,
            rank: 0,
            selected: false,
        })
        .collect();
    assign_ranks(&mut reports);
    let selection = select(&mut reports, budget, mode);
    Ok(RoundOutcome {
        reports,
        selection,
        degenerate,
    })
}

/// Patch the manifest splits: selected ids become labeled (revealing
/// their annotations), the rest of the unlabeled pool becomes the
/// remaining set. Logs the previous state.
pub fn apply_selection(
    manifest: &mut DatasetManifest,
    result: &SelectionResult,
    command: &str,
) -> Result<()> {
    manifest.set_split(
        &result.selected,
        Split::Labeled,
        command,
        &format!("mode={} selected={}", result.mode, result.selected.len()),
    )?;
    manifest.set_split(
        &result.remaining,
        Split::Remaining,
        command,
        &format!("mode={} remaining={}", result.mode, result.remaining.len()),
    )?;
    Ok(())
}

/// CSV serialization: `id,raw_score,norm_score,rank,selected` with a
/// leading provenance comment.
pub fn scores_to_csv(reports: &[ScoreReport], seed: u64, config_hash: &str) -> String {
    let mut out = format!("# seed={seed} config_hash={config_hash}\n");
    out.push_str("id,raw_score,norm_score,rank,selected\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id, r.raw_score, r.norm_score, r.rank, r.selected
        ));
    }
    out
}
