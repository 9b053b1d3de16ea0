use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LmConfig, LmParams};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;
use crate::util::write_atomic;

const MANIFEST_FILE: &str = "checkpoint.json";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lm,
    Bilm,
}

/// Everything about a saved model except its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub architecture: serde_json::Value,
    pub vocab_hash: String,
    pub epoch: usize,
    pub validation_metric: Option<f64>,
    pub config_hash: String,
}

impl CheckpointManifest {
    pub fn save(&self, dir: &Path, store: &ParamStore) -> Result<()> {
        store.save(dir)?;
        write_atomic(
            &dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }

    pub fn load(dir: &Path) -> Result<(Self, ParamStore)> {
        let manifest: CheckpointManifest =
            serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {}",
                manifest.format_version
            )));
        }
        Ok((manifest, ParamStore::load(dir)?))
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(MANIFEST_FILE).is_file()
    }
}

/// A saved language model with its training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: LmParams,
    pub epoch: usize,
    pub validation_metric: Option<f64>,
    pub config_hash: String,
    pub vocab_hash: String,
}

impl Checkpoint {
    pub fn manifest(&self) -> Result<CheckpointManifest> {
        Ok(CheckpointManifest {
            format_version: CHECKPOINT_FORMAT,
            kind: ModelKind::Lm,
            architecture: serde_json::to_value(&self.params.config)?,
            vocab_hash: self.vocab_hash.clone(),
            epoch: self.epoch,
            validation_metric: self.validation_metric,
            config_hash: self.config_hash.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.manifest()?.save(dir, &self.params.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, store) = CheckpointManifest::load(dir)?;
        if m.kind != ModelKind::Lm {
            return Err(Error::Format(format!(
                "{} holds a {:?} checkpoint, expected a language model",
                dir.display(),
                m.kind
            )));
        }
        let config: LmConfig = serde_json::from_value(m.architecture)?;
        Ok(Checkpoint {
            params: LmParams::from_store(config, store)?,
            epoch: m.epoch,
            validation_metric: m.validation_metric,
            config_hash: m.config_hash,
            vocab_hash: m.vocab_hash,
        })
    }
}

pub(crate) fn checkpoint_format() -> u32 {
    CHECKPOINT_FORMAT
}
