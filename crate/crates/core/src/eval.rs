//! Answer normalisation and set-based QA metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A set of normalised answers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet(BTreeSet<String>);

impl AnswerSet {
    pub fn new<I, S>(answers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(
            answers
                .into_iter()
                .map(|a| normalize_answer(a.as_ref()))
                .filter(|a| !a.is_empty())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, a: &str) -> bool {
        self.0.contains(a)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn intersection_len(&self, other: &AnswerSet) -> usize {
        self.0.intersection(&other.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hit: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("gold answer set is empty")]
    EmptyGold,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall as one division, `2c / (p + g)`,
/// so the result is the correctly rounded value of the exact fraction.
fn f1_from_counts(common: usize, predicted: usize, gold: usize) -> f64 {
    ratio(2 * common, predicted + gold)
}

pub fn score_instance(pred: &AnswerSet, gold: &AnswerSet) -> Result<Metrics, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let common = pred.intersection_len(gold);
    Ok(Metrics {
        hit: common > 0,
        precision: ratio(common, pred.len()),
        recall: ratio(common, gold.len()),
        f1: f1_from_counts(common, pred.len(), gold.len()),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub hit: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub instances: usize,
    /// Per-question averages.
    #[serde(rename = "macro")]
    pub macro_avg: Aggregate,
    /// Pooled counts over all questions. `hit` is the macro hit rate.
    #[serde(rename = "micro")]
    pub micro_avg: Aggregate,
}

/// Scores `(prediction, gold)` pairs. An empty dataset yields all zeros.
pub fn evaluate_dataset(pairs: &[(AnswerSet, AnswerSet)]) -> Result<DatasetReport, EvalError> {
    let n = pairs.len();
    if n == 0 {
        return Ok(DatasetReport::default());
    }
    let mut sum = Aggregate::default();
    let (mut common, mut predicted, mut gold_total) = (0usize, 0usize, 0usize);
    for (pred, gold) in pairs {
        let m = score_instance(pred, gold)?;
        sum.hit += f64::from(u8::from(m.hit));
        sum.precision += m.precision;
        sum.recall += m.recall;
        sum.f1 += m.f1;
        common += pred.intersection_len(gold);
        predicted += pred.len();
        gold_total += gold.len();
    }
    let nf = n as f64;
    let macro_avg = Aggregate {
        hit: sum.hit / nf,
        precision: sum.precision / nf,
        recall: sum.recall / nf,
        f1: sum.f1 / nf,
    };
    let micro_p = ratio(common, predicted);
    let micro_r = ratio(common, gold_total);
    Ok(DatasetReport {
        instances: n,
        macro_avg,
        micro_avg: Aggregate {
            hit: macro_avg.hit,
            precision: micro_p,
            recall: micro_r,
            f1: f1_from_counts(common, predicted, gold_total),
        },
    })
}
