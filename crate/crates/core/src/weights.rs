//! Binary checkpoint: magic + version header, a JSON architecture
//! descriptor, then every weight as little-endian f64 in declaration
//! order (teacher, student, fusion, codebook).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmenterParams;
use crate::error::{Error, Result};
use crate::segnet::{SegArch, SegModel};
use crate::tfm::{Codebook, TfmArch, TfmModule};

const MAGIC: &[u8; 4] = b"CSWB";
const VERSION: u32 = 1;

/// Everything a later scoring or evaluation command needs to resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: String,
    pub teacher: SegModel,
    pub student: SegModel,
    pub tfm: Option<TfmModule>,
    pub codebook: Option<Codebook>,
    pub augmenter: AugmenterParams,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    seed: u64,
    config_hash: String,
    seg_arch: SegArch,
    tfm_arch: Option<TfmArch>,
    codebook_words: Option<Vec<String>>,
    augmenter: AugmenterParams,
    section_values: Vec<usize>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let descriptor = Descriptor {
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            seg_arch: self.teacher.arch.clone(),
            tfm_arch: self.tfm.as_ref().map(|t| t.arch.clone()),
            codebook_words: self.codebook.as_ref().map(|c| c.words().to_vec()),
            augmenter: self.augmenter,
            section_values: vec![
                self.teacher.params.total_values(),
                self.student.params.total_values(),
                self.tfm.as_ref().map_or(0, |t| t.params.total_values()),
                self.codebook.as_ref().map_or(0, |c| c.params.total_values()),
            ],
        };
        let desc = serde_json::to_vec(&descriptor)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(&desc);
        out.extend_from_slice(&self.teacher.params.to_bytes());
        out.extend_from_slice(&self.student.params.to_bytes());
        if let Some(t) = &self.tfm {
            out.extend_from_slice(&t.params.to_bytes());
        }
        if let Some(c) = &self.codebook {
            out.extend_from_slice(&c.params.to_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::MissingWeights(path.to_path_buf()));
        }
        let data = std::fs::read(path)?;
        if data.len() < 12 || &data[..4] != MAGIC {
            return Err(Error::BadWeights("bad magic".into()));
        }
        let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::BadWeights(format!("unsupported version {version}")));
        }
        let dlen = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
        if data.len() < 12 + dlen {
            return Err(Error::BadWeights("truncated descriptor".into()));
        }
        let descriptor: Descriptor = serde_json::from_slice(&data[12..12 + dlen])
            .map_err(|e| Error::BadWeights(format!("descriptor: {e}")))?;
        let mut off = 12 + dlen;
        let mut take = |n_values: usize| -> Result<&[u8]> {
            let bytes = n_values * 8;
            if data.len() < off + bytes {
                return Err(Error::BadWeights("truncated weight payload".into()));
            }
            let s = &data[off..off + bytes];
            off += bytes;
            Ok(s)
        };

        // Rebuild the registries from the architecture, then overwrite
        // the values from the payload.
        let mut teacher = SegModel::new(descriptor.seg_arch.clone(), 0);
        let mut student = SegModel::new(descriptor.seg_arch.clone(), 0);
        if teacher.params.total_values() != descriptor.section_values[0]
            || student.params.total_values() != descriptor.section_values[1]
        {
            return Err(Error::BadWeights("section lengths disagree with architecture".into()));
        }
        teacher.params.from_bytes(take(descriptor.section_values[0])?)?;
        student.params.from_bytes(take(descriptor.section_values[1])?)?;
        let tfm = match &descriptor.tfm_arch {
            Some(arch) => {
                let mut t = TfmModule::new(arch.clone(), 0);
                t.params.from_bytes(take(descriptor.section_values[2])?)?;
                Some(t)
            }
            None => None,
        };
        let codebook = match &descriptor.codebook_words {
            Some(words) if !words.is_empty() => {
                let dim = descriptor.section_values[3] / words.len();
                let mut params = crate::params::ParamSet::new();
                for w in words {
                    params.add(format!("codebook.{w}"), vec![dim], vec![0.0; dim]);
                }
                let mut cb = Codebook::from_parts(words.clone(), params, dim);
                cb.params.from_bytes(take(descriptor.section_values[3])?)?;
                Some(cb)
            }
            _ => None,
        };
        Ok(Checkpoint {
            seed: descriptor.seed,
            config_hash: descriptor.config_hash,
            teacher,
            student,
            tfm,
            codebook,
            augmenter: descriptor.augmenter,
        })
    }
}
