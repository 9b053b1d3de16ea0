//! Contextual sentence probability estimation with a word-level recurrent
//! language model trained by sentence-level noise-contrastive estimation.
//!
//! The crate covers the whole pipeline: corpus preparation, a small
//! reverse-mode autodiff engine, the language model, sentence scoring,
//! the training objectives, negative-sentence samplers and the cloze-question
//! evaluation harness.

pub mod cloze;
pub mod corpus;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod lm;
pub mod nce;
pub mod noise;
pub mod scoring;
pub mod tensor;
pub mod util;

pub use cloze::{ClozeQuestion, EncodedQuestion, EvalReport, Provenance};
pub use corpus::{CorpusKind, SentencePair, Vocabulary};
pub use error::{Error, Result};
pub use lm::{Checkpoint, LmConfig, LmParams, LmState, SoftmaxMode};
pub use nce::{LossWeights, PretrainConfig, TrainConfig};
pub use noise::{BiLmCheckpoint, BiLmConfig, BiLmParams, BiLmTrainConfig, SamplerKind};
pub use scoring::{Criterion, SentenceScore};
pub use tensor::{AdamConfig, Gradients, ParamStore, Tape, Tensor};
