//! Dataset manifest: JSON-lines file with one metadata line followed by
//! one record per line. Split tags partition the records; selection
//! commands patch them in place and log the previous state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgfeat::{CorpusStats, FeatureLayout};

pub const MANIFEST_FORMAT: &str = "camoseg-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Remaining,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Remaining => "remaining",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

/// One image record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_word: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referring_text: Option<String>,
    pub split: Split,
}

/// Corpus feature statistics plus the resolution they were computed at,
/// recorded once by the cold-start command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStatsRecord {
    pub stats: CorpusStats,
    pub layout: FeatureLayout,
    pub feature_resolution: usize,
}

/// One state-changing command applied to the manifest, with enough of
/// the previous state to reconstruct it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceEvent {
    pub command: String,
    pub detail: String,
    /// (id, split before the command) for every record it changed.
    pub previous: Vec<(String, Split)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_stats: Option<CorpusStatsRecord>,
    /// How many ground-truth annotations have been revealed so far.
    pub revealed: usize,
    #[serde(default)]
    pub provenance: Vec<ProvenanceEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub meta: ManifestMeta,
    pub records: Vec<Sample>,
}

impl DatasetManifest {
    pub fn new(seed: u64, config_hash: String, records: Vec<Sample>) -> Result<Self> {
        let m = Self {
            meta: ManifestMeta {
                format: MANIFEST_FORMAT.into(),
                version: MANIFEST_VERSION,
                seed,
                config_hash,
                generator: None,
                corpus_stats: None,
                revealed: 0,
                provenance: Vec::new(),
            },
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(Error::BadManifest(format!("duplicate id {:?}", r.id)));
            }
            if r.split == Split::Labeled && (r.mask_path.is_none() || r.class_word.is_none()) {
                return Err(Error::BadManifest(format!(
                    "labeled record {:?} is missing mask_path or class_word",
                    r.id
                )));
            }
        }
        Ok(())
    }

    pub fn by_split(&self, split: Split) -> Vec<&Sample> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.records {
            let i = match r.split {
                Split::Labeled => 0,
                Split::Unlabeled => 1,
                Split::Remaining => 2,
                Split::Test => 3,
            };
            c[i] += 1;
        }
        c
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Move the given records to a new split, logging the previous
    /// state. Moving a record into the labeled split counts as
    /// revealing its annotation (the label-cost counter).
    pub fn set_split(&mut self, ids: &[String], to: Split, command: &str, detail: &str) -> Result<()> {
        let mut previous = Vec::with_capacity(ids.len());
        for id in ids {
            let rec = self
                .records
                .iter_mut()
                .find(|r| &r.id == id)
                .ok_or_else(|| Error::BadManifest(format!("unknown id {id:?}")))?;
            previous.push((id.clone(), rec.split));
            if to == Split::Labeled && rec.split != Split::Labeled {
                if rec.mask_path.is_none() || rec.class_word.is_none() {
                    return Err(Error::BadManifest(format!(
                        "record {id:?} has no ground truth to reveal"
                    )));
                }
                self.meta.revealed += 1;
            }
            rec.split = to;
        }
        self.meta.provenance.push(ProvenanceEvent {
            command: command.to_string(),
            detail: detail.to_string(),
            previous,
        });
        Ok(())
    }

    /// JSON lines: metadata line, then one record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = serde_json::to_string(&self.meta)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let meta_line = lines
            .next()
            .ok_or_else(|| Error::BadManifest("empty manifest file".into()))?;
        let meta: ManifestMeta = serde_json::from_str(meta_line)?;
        if meta.format != MANIFEST_FORMAT {
            return Err(Error::BadManifest(format!(
                "unexpected format tag {:?}",
                meta.format
            )));
        }
        let mut records = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        let m = Self { meta, records };
        m.validate()?;
        Ok(m)
    }
}
