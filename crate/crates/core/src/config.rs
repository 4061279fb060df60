//! Run configuration: TOML sections of flat keys. Unknown keys are
//! rejected with the offending key named.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub features: FeatureSection,
    pub train: TrainSection,
    pub select: SelectSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for per-image parallel work; 0 = library default.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Square image extent; must be divisible by 2^levels.
    pub size: usize,
    pub train_images: usize,
    pub test_images: usize,
    /// Camouflage level: object/background texture blend weight.
    pub kappa: f64,
    /// Per-image uniform jitter on kappa.
    pub kappa_spread: f64,
    pub object_min_frac: f64,
    pub object_max_frac: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Shape families; each doubles as the class word.
    pub families: Vec<String>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            size: 64,
            train_images: 40,
            test_images: 8,
            kappa: 0.7,
            kappa_spread: 0.2,
            object_min_frac: 0.04,
            object_max_frac: 0.25,
            objects_min: 1,
            objects_max: 1,
            families: vec![
                "amoeba".into(),
                "ring".into(),
                "worm".into(),
                "star".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub text_dim: usize,
    pub head_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            text_dim: 32,
            head_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub color_bins: usize,
    pub texture_bins: usize,
    pub frequency_block: usize,
    /// Cold-start descriptors are computed at this square resolution.
    pub resolution: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            color_bins: 8,
            texture_bins: 16,
            frequency_block: 8,
            resolution: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    Soft,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalText {
    /// Use each record's own referring text when present.
    Precise,
    /// Always the fixed unlabeled sentence.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnLossKind {
    MaxRescaled,
    Raw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Working resolution; images are area-resized to this extent.
    pub resolution: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub lr_augmenter: f64,
    pub ema_momentum: f64,
    pub lambda_u: f64,
    /// Ramp the unsupervised weight linearly over the first 20 percent
    /// of joint epochs.
    pub lambda_u_ramp: bool,
    pub pseudo_label: PseudoLabelMode,
    pub pseudo_threshold: f64,
    pub jitter_sigma: f64,
    pub tfm_enabled: bool,
    pub ada_enabled: bool,
    pub attn_loss: AttnLossKind,
    pub freeze_codebook: bool,
    pub seg_bce: bool,
    pub seg_iou: bool,
    pub seg_ssim: bool,
    pub eval_every: usize,
    pub eval_model: EvalModel,
    pub eval_text: EvalText,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            resolution: 64,
            pretrain_epochs: 6,
            joint_epochs: 10,
            batch_labeled: 2,
            batch_unlabeled: 8,
            lr: 1e-4,
            lr_augmenter: 0.05,
            ema_momentum: 0.99,
            lambda_u: 1.0,
            lambda_u_ramp: false,
            pseudo_label: PseudoLabelMode::Soft,
            pseudo_threshold: 0.5,
            jitter_sigma: 0.05,
            tfm_enabled: true,
            ada_enabled: true,
            attn_loss: AttnLossKind::MaxRescaled,
            freeze_codebook: false,
            seg_bce: true,
            seg_iou: true,
            seg_ssim: true,
            eval_every: 1,
            eval_model: EvalModel::Student,
            eval_text: EvalText::Precise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionModeKey {
    Center,
    TopKEasy,
    TopKHard,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Kmeans,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    /// Total label budget, split half to cold start, half across the
    /// selection rounds.
    pub budget: usize,
    pub rounds: usize,
    pub mode: SelectionModeKey,
    pub center: f64,
    pub init: InitMode,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            budget: 8,
            rounds: 1,
            mode: SelectionModeKey::Center,
            center: 0.5,
            init: InitMode::Kmeans,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical serialized form; embedded in every output
    /// file for reproducibility.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let factor = 1usize << self.model.widths.len();
        if self.synth.size % factor != 0 || self.train.resolution % factor != 0 {
            return Err(Error::Config(format!(
                "image extents must be divisible by {factor} (synth.size={}, train.resolution={})",
                self.synth.size, self.train.resolution
            )));
        }
        if !(0.0..=1.0).contains(&self.synth.kappa) {
            return Err(Error::Config(format!(
                "synth.kappa must lie in [0,1], got {}",
                self.synth.kappa
            )));
        }
        if self.model.widths.len() < 2 {
            return Err(Error::Config("model.widths needs at least two levels".into()));
        }
        if self.train.lambda_u < 0.0 {
            return Err(Error::Config("train.lambda_u must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.train.ema_momentum) {
            return Err(Error::Config("train.ema_momentum must lie in [0,1)".into()));
        }
        if self.train.pseudo_label == PseudoLabelMode::Threshold
            && !(0.0..1.0).contains(&self.train.pseudo_threshold)
        {
            return Err(Error::Config("train.pseudo_threshold must lie in (0,1)".into()));
        }
        if self.select.rounds == 0 {
            return Err(Error::Config("select.rounds must be at least 1".into()));
        }
        if self.synth.objects_min == 0 || self.synth.objects_min > self.synth.objects_max {
            return Err(Error::Config("invalid synth object count range".into()));
        }
        Ok(())
    }
}
