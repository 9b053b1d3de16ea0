//! Sentence-cloze questions: generation from held-out pairs, the JSONL
//! question format, grading and accuracy reports.

mod report;

pub use report::{render_table, ResultsTable, TableRow};

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusKind, SentencePair, Vocabulary};
use crate::error::{Error, Result};
use crate::lm::LmParams;
use crate::noise::{mask_tokens, resample_batch, BiLmParams, MAX_REDRAWS};
use crate::scoring::{argmax, score_choices, Criterion, SentenceScore};
use crate::util::{derive_seed, write_atomic};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    BatchNeg,
    Resampled,
    #[default]
    External,
}

/// A question as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeQuestion {
    pub context: String,
    pub choices: Vec<String>,
    pub answer: usize,
    #[serde(default)]
    pub provenance: Provenance,
}

/// A question in token ids, ready for scoring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedQuestion {
    pub context: Vec<usize>,
    pub choices: Vec<Vec<usize>>,
    pub answer: usize,
}

impl EncodedQuestion {
    pub fn decode(&self, vocab: &Vocabulary, provenance: Provenance) -> ClozeQuestion {
        let text = |ids: &[usize]| vocab.decode(ids).join(" ");
        ClozeQuestion {
            context: text(&self.context),
            choices: self.choices.iter().map(|c| text(c)).collect(),
            answer: self.answer,
            provenance,
        }
    }
}

impl ClozeQuestion {
    fn check(&self) -> std::result::Result<(), String> {
        if self.choices.len() < 2 {
            return Err(format!("need at least 2 choices, got {}", self.choices.len()));
        }
        if self.answer >= self.choices.len() {
            return Err(format!(
                "answer {} out of range for {} choices",
                self.answer,
                self.choices.len()
            ));
        }
        Ok(())
    }

    /// Tokenizes and maps to ids; choices must stay pairwise distinct.
    pub fn encode(&self, vocab: &Vocabulary, kind: CorpusKind) -> Result<EncodedQuestion> {
        self.check().map_err(Error::InvalidInput)?;
        let enc = |s: &str| -> Result<Vec<usize>> {
            let ids = vocab.encode(&kind.tokenize(s));
            if ids.is_empty() {
                return Err(Error::invalid(format!("sentence {s:?} has no tokens")));
            }
            Ok(ids)
        };
        let choices = self.choices.iter().map(|c| enc(c)).collect::<Result<Vec<_>>>()?;
        let distinct: HashSet<&Vec<usize>> = choices.iter().collect();
        if distinct.len() != choices.len() {
            return Err(Error::invalid("choices are not pairwise distinct after tokenization"));
        }
        Ok(EncodedQuestion {
            context: enc(&self.context)?,
            choices,
            answer: self.answer,
        })
    }
}

pub fn encode_questions(qs: &[ClozeQuestion], vocab: &Vocabulary, kind: CorpusKind) -> Result<Vec<EncodedQuestion>> {
    qs.iter()
        .enumerate()
        .map(|(i, q)| {
            q.encode(vocab, kind)
                .map_err(|e| Error::invalid(format!("question {}: {e}", i + 1)))
        })
        .collect()
}

/// Parses JSONL questions; `origin` labels errors. Records without a
/// provenance field are marked external.
pub fn parse_questions(text: &str, origin: &Path) -> Result<Vec<ClozeQuestion>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |msg: String| Error::Schema {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let q: ClozeQuestion = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        q.check().map_err(schema)?;
        out.push(q);
    }
    Ok(out)
}

pub fn load_questions(path: &Path) -> Result<Vec<ClozeQuestion>> {
    parse_questions(&std::fs::read_to_string(path)?, path)
}

pub fn questions_to_jsonl(qs: &[ClozeQuestion]) -> Result<String> {
    let mut out = String::new();
    for q in qs {
        out.push_str(&serde_json::to_string(q)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_questions(path: &Path, qs: &[ClozeQuestion]) -> Result<()> {
    write_atomic(path, questions_to_jsonl(qs)?.as_bytes())
}

/// Where distractors come from.
#[derive(Clone, Copy, Debug)]
pub enum DistractorSource<'a> {
    /// `b` sentences of other evaluation pairs.
    BatchNeg,
    /// Mask-and-resample transformations of the pair's own `b`.
    Resampled { bilm: &'a BiLmParams, mask_rate: f64 },
}

impl DistractorSource<'_> {
    pub fn provenance(&self) -> Provenance {
        match self {
            DistractorSource::BatchNeg => Provenance::BatchNeg,
            DistractorSource::Resampled { .. } => Provenance::Resampled,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedQuestions {
    pub questions: Vec<EncodedQuestion>,
    pub provenance: Provenance,
    /// Questions abandoned because distinct distractors ran out.
    pub dropped: usize,
}

/// One question per pair (or `count` questions drawn over a shuffled,
/// repeating pass of the pairs) with `k` choices.
///
/// Distractors equal to the true sentence, to another distractor or to a
/// member of `exclude` are redrawn; a slot that is still unfilled after
/// [`MAX_REDRAWS`] redraws drops its question.
pub fn generate_questions(
    pairs: &[SentencePair],
    source: DistractorSource<'_>,
    k: usize,
    count: Option<usize>,
    exclude: Option<&HashSet<Vec<usize>>>,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedQuestions> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 choices, got {k}")));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no evaluation pairs"));
    }
    if matches!(source, DistractorSource::BatchNeg) && pairs.len() < k {
        return Err(Error::invalid(format!(
            "{} evaluation pairs cannot supply {} distinct choices",
            pairs.len(),
            k
        )));
    }
    let order: Vec<usize> = match count {
        None => (0..pairs.len()).collect(),
        Some(n) => {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let mut pass: Vec<usize> = (0..pairs.len()).collect();
                pass.shuffle(rng);
                out.extend(pass.into_iter().take(n - out.len()));
            }
            out
        }
    };
    let blocked = |s: &[usize]| exclude.is_some_and(|e| e.contains(s));
    let mut questions = Vec::with_capacity(order.len());
    let mut dropped = 0;
    for &i in &order {
        let truth = &pairs[i].b;
        let distractors = match source {
            DistractorSource::BatchNeg => {
                let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(k - 1);
                'slots: for _ in 0..k - 1 {
                    for _ in 0..=MAX_REDRAWS {
                        let mut j = rng.gen_range(0..pairs.len() - 1);
                        if j >= i {
                            j += 1;
                        }
                        let cand = &pairs[j].b;
                        if cand != truth && !chosen.contains(cand) && !blocked(cand) {
                            chosen.push(cand.clone());
                            continue 'slots;
                        }
                    }
                    break;
                }
                chosen
            }
            DistractorSource::Resampled { bilm, mask_rate } => {
                let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(k - 1);
                for _ in 0..=MAX_REDRAWS {
                    let need = k - 1 - chosen.len();
                    if need == 0 {
                        break;
                    }
                    let masked = (0..need)
                        .map(|_| mask_tokens(truth, mask_rate, rng))
                        .collect::<Result<Vec<_>>>()?;
                    for cand in resample_batch(&masked, bilm, rng)? {
                        if &cand != truth && !chosen.contains(&cand) && !blocked(&cand) {
                            chosen.push(cand);
                        }
                    }
                }
                chosen
            }
        };
        if distractors.len() < k - 1 {
            dropped += 1;
            continue;
        }
        let answer = rng.gen_range(0..k);
        let mut choices = distractors;
        choices.insert(answer, truth.clone());
        questions.push(EncodedQuestion {
            context: pairs[i].a.clone(),
            choices,
            answer,
        });
    }
    Ok(GeneratedQuestions {
        questions,
        provenance: source.provenance(),
        dropped,
    })
}

/// Scores each choice of each question; higher is better.
pub trait ChoiceScorer {
    fn score(&self, questions: &[EncodedQuestion]) -> Result<Vec<Vec<f64>>>;
}

pub struct LmScorer<'a> {
    pub lm: &'a LmParams,
    pub criterion: Criterion,
}

impl ChoiceScorer for LmScorer<'_> {
    fn score(&self, questions: &[EncodedQuestion]) -> Result<Vec<Vec<f64>>> {
        Ok(criterion_values(&score_questions(self.lm, questions)?, self.criterion))
    }
}

/// Independent uniform scores, reproducible per question index.
pub struct RandomScorer {
    pub seed: u64,
}

impl ChoiceScorer for RandomScorer {
    fn score(&self, questions: &[EncodedQuestion]) -> Result<Vec<Vec<f64>>> {
        Ok(questions
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("random-scorer-{i}")));
                (0..q.choices.len()).map(|_| rng.gen::<f64>()).collect()
            })
            .collect())
    }
}

/// Knows the answers.
pub struct OracleScorer;

impl ChoiceScorer for OracleScorer {
    fn score(&self, questions: &[EncodedQuestion]) -> Result<Vec<Vec<f64>>> {
        Ok(questions
            .iter()
            .map(|q| {
                (0..q.choices.len())
                    .map(|j| if j == q.answer { 0.0 } else { -1.0 })
                    .collect()
            })
            .collect())
    }
}

/// Both log-probabilities for every choice.
pub fn score_questions(lm: &LmParams, questions: &[EncodedQuestion]) -> Result<Vec<Vec<SentenceScore>>> {
    let items: Vec<(&[usize], &[Vec<usize>])> = questions
        .iter()
        .map(|q| (q.context.as_slice(), q.choices.as_slice()))
        .collect();
    score_choices(lm, &items)
}

pub fn criterion_values(scores: &[Vec<SentenceScore>], criterion: Criterion) -> Vec<Vec<f64>> {
    scores
        .iter()
        .map(|row| row.iter().map(|s| s.value(criterion)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub selected: usize,
    pub answer: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub questions: Vec<QuestionResult>,
}

pub fn grade_scores(questions: &[EncodedQuestion], scores: &[Vec<f64>]) -> Result<EvalReport> {
    if questions.is_empty() {
        return Err(Error::invalid("empty question set"));
    }
    if scores.len() != questions.len() {
        return Err(Error::invalid(format!(
            "{} score rows for {} questions",
            scores.len(),
            questions.len()
        )));
    }
    let mut results = Vec::with_capacity(questions.len());
    for (i, (q, s)) in questions.iter().zip(scores).enumerate() {
        if s.len() != q.choices.len() {
            return Err(Error::invalid(format!(
                "question {i}: {} scores for {} choices",
                s.len(),
                q.choices.len()
            )));
        }
        results.push(QuestionResult {
            selected: argmax(s),
            answer: q.answer,
            scores: s.clone(),
        });
    }
    let correct = results.iter().filter(|r| r.selected == r.answer).count();
    Ok(EvalReport {
        total: results.len(),
        correct,
        accuracy: correct as f64 / results.len() as f64,
        questions: results,
    })
}

pub fn grade(questions: &[EncodedQuestion], scorer: &dyn ChoiceScorer) -> Result<EvalReport> {
    if questions.is_empty() {
        return Err(Error::invalid("empty question set"));
    }
    grade_scores(questions, &scorer.score(questions)?)
}
