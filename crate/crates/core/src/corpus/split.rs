use serde::{Deserialize, Serialize};

use super::{make_pairs, Document, SentencePair};
use crate::error::{Error, Result};
use crate::util::stable_hash64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Holdout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub holdout: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 8.0,
            validation: 1.0,
            holdout: 1.0,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.holdout];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || parts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(format!("bad split ratios {self:?}")));
        }
        Ok(())
    }

    /// Maps a uniform draw in `[0, 1)` to a partition.
    fn partition(&self, u: f64) -> Partition {
        let total = self.train + self.validation + self.holdout;
        if u < self.train / total {
            Partition::Train
        } else if u < (self.train + self.validation) / total {
            Partition::Validation
        } else {
            Partition::Holdout
        }
    }
}

/// Document ids per partition, reproducible from `(seed, ratios)` alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl SplitManifest {
    pub fn partition_of(&self, doc: usize) -> Option<Partition> {
        if self.train.binary_search(&doc).is_ok() {
            Some(Partition::Train)
        } else if self.validation.binary_search(&doc).is_ok() {
            Some(Partition::Validation)
        } else if self.holdout.binary_search(&doc).is_ok() {
            Some(Partition::Holdout)
        } else {
            None
        }
    }

    pub fn docs(&self, p: Partition) -> &[usize] {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Holdout => &self.holdout,
        }
    }
}

/// Assigns each document to a partition by a stable hash of its id under `seed`.
pub fn split_documents(doc_ids: &[usize], seed: u64, ratios: SplitRatios) -> Result<SplitManifest> {
    ratios.validate()?;
    let mut m = SplitManifest {
        seed,
        ratios,
        train: Vec::new(),
        validation: Vec::new(),
        holdout: Vec::new(),
    };
    for &id in doc_ids {
        let h = stable_hash64(&[b"split", &seed.to_le_bytes(), &(id as u64).to_le_bytes()]);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        match ratios.partition(u) {
            Partition::Train => m.train.push(id),
            Partition::Validation => m.validation.push(id),
            Partition::Holdout => m.holdout.push(id),
        }
    }
    m.train.sort_unstable();
    m.validation.sort_unstable();
    m.holdout.sort_unstable();
    Ok(m)
}

/// Sentence pairs of each partition.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub ratios: SplitRatios,
    pub train: Vec<SentencePair>,
    pub validation: Vec<SentencePair>,
    pub holdout: Vec<SentencePair>,
}

impl CorpusSplit {
    pub fn from_manifest(docs: &[Document], manifest: &SplitManifest) -> Self {
        let select = |p: Partition| {
            let chosen: Vec<Document> = docs
                .iter()
                .filter(|d| manifest.partition_of(d.id) == Some(p))
                .cloned()
                .collect();
            make_pairs(&chosen)
        };
        CorpusSplit {
            ratios: manifest.ratios,
            train: select(Partition::Train),
            validation: select(Partition::Validation),
            holdout: select(Partition::Holdout),
        }
    }

    pub fn pairs(&self, p: Partition) -> &[SentencePair] {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Holdout => &self.holdout,
        }
    }
}
