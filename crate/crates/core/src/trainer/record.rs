//! Deterministic run record: config echo, phase boundaries in the run's
//! logical clock, per-epoch losses and metrics, selection decisions,
//! and the final weight checksum. No wall-clock content, so identical
//! seeds produce bit-identical records.

use serde::{Deserialize, Serialize};

use crate::adas::ScoreReport;
use crate::augment::AugmenterParams;
use crate::config::Config;
use crate::metrics::MetricReport;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseLog {
    pub name: String,
    pub epochs: usize,
    pub iterations: usize,
    pub start_iteration: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColdStartLog {
    pub method: String,
    pub budget: usize,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionLog {
    pub round: usize,
    pub mode: String,
    pub budget: usize,
    pub selected: Vec<String>,
    pub degenerate: bool,
    pub reports: Vec<ScoreReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub lr_factor: f64,
    pub lambda_u: f64,
    pub loss_total: f64,
    pub loss_seg: f64,
    pub loss_aug: f64,
    pub loss_tfm: f64,
    pub loss_unsup: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub config: Config,
    pub phases: Vec<PhaseLog>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cold_start: Option<ColdStartLog>,
    pub selection_rounds: Vec<SelectionLog>,
    pub epoch_log: Vec<EpochLog>,
    /// Total loss per optimizer iteration, append-only.
    pub iteration_loss: Vec<f64>,
    /// Ground-truth annotations revealed over the whole run.
    pub label_cost: usize,
    pub augmenter: AugmenterParams,
    pub weight_checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_test: Option<MetricReport>,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run record serializes")
    }

    pub fn from_json(text: &str) -> crate::error::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
