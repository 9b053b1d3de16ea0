use serde::{Deserialize, Serialize};

use crate::cloze::{criterion_values, grade_scores, score_questions, EncodedQuestion, EvalReport};
use crate::error::{Error, Result};
use crate::lm::LmParams;
use crate::scoring::{Criterion, SentenceScore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Position of the chosen checkpoint in the input list.
    pub index: usize,
    pub epoch: usize,
    pub validation_accuracy: Vec<f64>,
    pub holdout: EvalReport,
}

/// Highest accuracy, earliest on ties.
pub fn select_index(accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in accuracies.iter().enumerate() {
        if best.is_none_or(|b| a > accuracies[b]) {
            best = Some(i);
        }
    }
    best
}

fn check_sets(validation: &[EncodedQuestion], holdout: &[EncodedQuestion]) -> Result<()> {
    if validation.is_empty() || holdout.is_empty() {
        return Err(Error::invalid("validation and holdout question sets must be non-empty"));
    }
    Ok(())
}

/// Grades every checkpoint on the validation questions, keeps the best and
/// reports its holdout accuracy.
pub fn select_checkpoint(
    checkpoints: &[(usize, &LmParams)],
    validation: &[EncodedQuestion],
    holdout: &[EncodedQuestion],
    criterion: Criterion,
) -> Result<Selection> {
    check_sets(validation, holdout)?;
    if checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints to select from"));
    }
    let mut accs = Vec::with_capacity(checkpoints.len());
    for (_, lm) in checkpoints {
        let scores = score_questions(lm, validation)?;
        accs.push(grade_scores(validation, &criterion_values(&scores, criterion))?.accuracy);
    }
    let index = select_index(&accs).expect("non-empty");
    let scores = score_questions(checkpoints[index].1, holdout)?;
    Ok(Selection {
        index,
        epoch: checkpoints[index].0,
        validation_accuracy: accs,
        holdout: grade_scores(holdout, &criterion_values(&scores, criterion))?,
    })
}

/// The same selection from previously computed (for example, dumped)
/// per-checkpoint scores.
pub fn select_from_scores(
    epochs: &[usize],
    validation_scores: &[Vec<Vec<SentenceScore>>],
    holdout_scores: &[Vec<Vec<SentenceScore>>],
    validation: &[EncodedQuestion],
    holdout: &[EncodedQuestion],
    criterion: Criterion,
) -> Result<Selection> {
    check_sets(validation, holdout)?;
    if epochs.is_empty() || validation_scores.len() != epochs.len() || holdout_scores.len() != epochs.len() {
        return Err(Error::invalid("need one validation and one holdout score set per checkpoint"));
    }
    let accs = validation_scores
        .iter()
        .map(|s| Ok(grade_scores(validation, &criterion_values(s, criterion))?.accuracy))
        .collect::<Result<Vec<_>>>()?;
    let index = select_index(&accs).expect("non-empty");
    Ok(Selection {
        index,
        epoch: epochs[index],
        validation_accuracy: accs,
        holdout: grade_scores(holdout, &criterion_values(&holdout_scores[index], criterion))?,
    })
}
