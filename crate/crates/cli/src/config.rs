//! Run configuration: one file drives every stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;
use spe_core::corpus::SplitRatios;
use spe_core::util::{derive_seed, sha256_hex};
use spe_core::{
    AdamConfig, BiLmConfig, BiLmTrainConfig, CorpusKind, Criterion, LmConfig, LossWeights, PretrainConfig,
    SamplerKind, SoftmaxMode, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub criterion: Criterion,
    pub weights: LossWeights,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub bilm: BiLmSection,
    pub train: TrainConfig,
    pub questions: QuestionSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Every stage reads and writes below this directory.
    pub out: PathBuf,
    /// Optional extra question file (JSONL) graded by `evaluate`.
    pub external_questions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub kind: CorpusKind,
    /// Tokens seen this many times or fewer map to `<UNK>`.
    pub vocab_cutoff: u64,
    pub split: SplitRatios,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub softmax: SoftmaxMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiLmSection {
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub train: BiLmTrainConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionSource {
    #[default]
    BatchNeg,
    Resampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuestionSection {
    pub choices: usize,
    pub source: QuestionSource,
    /// Questions per split; one per usable pair when absent.
    pub count: Option<usize>,
    pub mask_rate: f64,
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        ..AdamConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            criterion: Criterion::Contrastive,
            weights: LossWeights::default(),
            paths: Paths::default(),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig {
                epochs: 10,
                batch_size: 20,
                adam: adam(2e-3),
                ..PretrainConfig::default()
            },
            bilm: BiLmSection::default(),
            train: TrainConfig {
                batch_size: 8,
                nu: 7,
                epochs: 20,
                adam: adam(2e-3),
                ..TrainConfig::default()
            },
            questions: QuestionSection::default(),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: PathBuf::from("data/abc_toy.txt"),
            out: PathBuf::from("runs"),
            external_questions: None,
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            kind: CorpusKind::Abc,
            vocab_cutoff: 0,
            split: SplitRatios::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            emb_dim: 64,
            hidden: 128,
            layers: 2,
            dropout: 0.2,
            softmax: SoftmaxMode::Relaxed,
        }
    }
}

impl Default for BiLmSection {
    fn default() -> Self {
        BiLmSection {
            emb_dim: 64,
            hidden: 128,
            layers: 1,
            dropout: 0.2,
            train: BiLmTrainConfig {
                epochs: 10,
                adam: adam(2e-3),
                ..BiLmTrainConfig::default()
            },
        }
    }
}

impl Default for QuestionSection {
    fn default() -> Self {
        QuestionSection {
            choices: 8,
            source: QuestionSource::BatchNeg,
            count: None,
            mask_rate: 0.15,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub criterion: Option<Criterion>,
    pub sampler: Option<SamplerKind>,
    pub weights: Option<LossWeights>,
    pub out: Option<PathBuf>,
}

fn hash_json(v: &serde_json::Value) -> String {
    sha256_hex(v.to_string().as_bytes())
}

impl RunConfig {
    /// TOML unless the file name ends in `.json`.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        };
        parsed.with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        Self::from_overlay(toml::from_str(text)?)
    }

    pub fn from_json_str(text: &str) -> anyhow::Result<Self> {
        Self::from_overlay(serde_json::from_str(text)?)
    }

    /// Fields missing from a section take the run defaults, not the
    /// library defaults of that section's type.
    fn from_overlay(doc: serde_json::Value) -> anyhow::Result<Self> {
        fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
            match (base, top) {
                (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
                    for (k, v) in t {
                        match b.get_mut(&k) {
                            Some(slot) => merge(slot, v),
                            None => {
                                b.insert(k, v);
                            }
                        }
                    }
                }
                (slot, v) => *slot = v,
            }
        }
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, doc);
        Ok(serde_json::from_value(base)?)
    }

    /// Applies overrides, derives every stage seed from the top-level seed
    /// and validates the result.
    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(c) = o.criterion {
            self.criterion = c;
        }
        if let Some(s) = o.sampler {
            self.train.sampler = s;
        }
        if let Some(w) = o.weights {
            self.weights = w;
        }
        if let Some(d) = &o.out {
            self.paths.out = d.clone();
        }
        self.pretrain.seed = derive_seed(self.seed, "pretrain");
        self.bilm.train.seed = derive_seed(self.seed, "bilm");
        self.train.seed = derive_seed(self.seed, "train-nce");
        self.weights.validate()?;
        self.corpus.split.validate()?;
        self.train.validate()?;
        if self.questions.choices < 2 {
            bail!("questions.choices must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.questions.mask_rate) || !(0.0..=1.0).contains(&self.train.mask_rate) {
            bail!("mask rates must lie in [0, 1]");
        }
        Ok(self)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn stage_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, name)
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            emb_dim: self.model.emb_dim,
            hidden: self.model.hidden,
            layers: self.model.layers,
            dropout: self.model.dropout,
            softmax: self.model.softmax,
        }
    }

    pub fn bilm_config(&self, vocab_size: usize) -> BiLmConfig {
        BiLmConfig {
            vocab_size,
            emb_dim: self.bilm.emb_dim,
            hidden: self.bilm.hidden,
            layers: self.bilm.layers,
            dropout: self.bilm.dropout,
        }
    }

    // Stage fingerprints chain through their inputs and leave out paths,
    // so moving a run directory does not invalidate it.

    pub fn prep_hash(&self) -> String {
        hash_json(&json!({"seed": self.seed, "corpus": self.corpus}))
    }

    pub fn pretrain_hash(&self) -> String {
        hash_json(&json!({"prep": self.prep_hash(), "model": self.model, "pretrain": self.pretrain}))
    }

    pub fn bilm_hash(&self) -> String {
        hash_json(&json!({"prep": self.prep_hash(), "bilm": self.bilm}))
    }

    pub fn nce_hash(&self) -> String {
        let bilm = (self.train.sampler == SamplerKind::Resampling).then(|| self.bilm_hash());
        hash_json(&json!({
            "pretrain": self.pretrain_hash(),
            "train": self.train,
            "weights": self.weights,
            "bilm": bilm,
        }))
    }

    pub fn questions_hash(&self) -> String {
        let bilm = (self.questions.source == QuestionSource::Resampled).then(|| self.bilm_hash());
        hash_json(&json!({"prep": self.prep_hash(), "questions": self.questions, "bilm": bilm}))
    }

    /// Directory name of a sentence-level training run.
    pub fn run_name(&self) -> String {
        format!("nce-{}-{}", self.train.sampler, self.weights)
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
