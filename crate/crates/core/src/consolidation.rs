//! Merging hypothesis answers into a final ranked answer list.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{serialize_triple, KnowledgePath, ALIGN_CLOSE, ALIGN_OPEN};
use crate::kg::LabelTriple;
use crate::prompts;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub path: KnowledgePath,
    pub answers: Vec<String>,
    /// S(z) of the candidate the hypothesis came from.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswer {
    pub answer: String,
    pub weight: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConsolidationError {
    #[error("no hypotheses to consolidate")]
    Empty,
}

/// Score-weighted vote: each answer gets the sum of `exp(score)` over the
/// hypotheses that propose it. Heaviest first, ties by label.
pub fn consolidate_default(hyps: &[Hypothesis]) -> Result<Vec<RankedAnswer>, ConsolidationError> {
    if hyps.is_empty() {
        return Err(ConsolidationError::Empty);
    }
    let mut support: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for h in hyps {
        let distinct: BTreeSet<&str> = h.answers.iter().map(String::as_str).collect();
        for a in distinct {
            support.entry(a).or_default().push(h.score.exp());
        }
    }
    let mut ranked: Vec<RankedAnswer> = support
        .into_iter()
        .map(|(answer, mut contributions)| {
            // Fixed summation order keeps the result independent of input order.
            contributions.sort_by(f64::total_cmp);
            RankedAnswer {
                answer: answer.to_owned(),
                weight: contributions.iter().sum(),
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.answer.cmp(&b.answer)));
    Ok(ranked)
}

fn render_path(path: &KnowledgePath) -> String {
    let mut out = String::from(ALIGN_OPEN);
    for t in &path.triples {
        out.push_str(&serialize_triple(t));
    }
    out.push_str(ALIGN_CLOSE);
    out
}

/// Prompt for an external consolidator. Scores are not shown to it.
pub fn build_consolidation_prompt(question: &str, hyps: &[Hypothesis]) -> String {
    let blocks: Vec<(String, Vec<String>)> = hyps
        .iter()
        .map(|h| (render_path(&h.path), h.answers.clone()))
        .collect();
    prompts::consolidation_prompt(question, &blocks)
}

/// One answer per non-empty line.
pub fn parse_consolidator_reply(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub path: Vec<[String; 3]>,
    pub answers: Vec<String>,
    pub score: f64,
}

impl From<&HypothesisRecord> for Hypothesis {
    fn from(r: &HypothesisRecord) -> Self {
        Hypothesis {
            path: KnowledgePath::new(
                r.path
                    .iter()
                    .map(|[h, rel, t]| LabelTriple::new(h.clone(), rel.clone(), t.clone()))
                    .collect(),
            ),
            answers: r.answers.clone(),
            score: r.score,
        }
    }
}

/// One question's worth of hypotheses, as read by the `consolidate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationInput {
    pub id: String,
    pub question: String,
    pub hypotheses: Vec<HypothesisRecord>,
}
