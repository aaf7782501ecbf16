//! Instruction templates for the ReAligner, Responser and Consolidator.
//!
//! The text is fixed byte for byte; golden files under `tests/golden`
//! pin it.

use crate::grammar::{parse_chain, parse_path, GraphAwareChain, GrammarError};

pub const INSTRUCTION: &str = "Generate a step-by-step thinking process for the given question. \
Ensure the thinking process is aligned with triples in the knowledge base.";

pub const CONSOLIDATION_INSTRUCTION: &str = "Based on the reasoning paths, please answer the given question. \
Please keep the answer as simple as possible and only return answers. \
Please return each answer in a new line.";

const THINKING: &str = "Thinking process:";
const ALIGN: &str = "Align Process:";
const SUMMARIZATION: &str = "Summarization:";

/// Prompt asking for a graph-aware reasoning chain.
pub fn realigner_prompt(question: &str, entities: &[&str]) -> String {
    format!(
        "{INSTRUCTION}\n\nQuestion:\n{question}\n\nQuery entities:\n{}",
        entities.join(", ")
    )
}

/// Expected ReAligner output for a serialized chain and path.
pub fn realigner_completion(chain: &str, path: &str) -> String {
    format!("{THINKING}\n{chain}\n\n{ALIGN}\n{path}")
}

/// Splits a ReAligner completion back into its chain and path. The chain
/// comes back as a single step.
pub fn parse_realigner_completion(text: &str) -> Result<GraphAwareChain, GrammarError> {
    let malformed = |offset| GrammarError::Parse {
        offset,
        message: "expected ReAligner completion".into(),
    };
    let body = text.trim_start().strip_prefix(THINKING).ok_or(malformed(0))?;
    let split = body.find(ALIGN).ok_or(malformed(text.len()))?;
    Ok(GraphAwareChain {
        chain: parse_chain(&body[..split])?,
        path: parse_path(&body[split + ALIGN.len()..], None)?,
    })
}

/// Prompt asking the Responser for the final answer.
pub fn responser_prompt(question: &str, entities: &[&str], chain: &str, path: &str) -> String {
    format!(
        "{}\n\n{}\n\n{SUMMARIZATION}",
        realigner_prompt(question, entities),
        realigner_completion(chain, path)
    )
}

pub fn responser_completion(answers: &[String]) -> String {
    answers.join("\n")
}

/// Prompt for merging hypotheses. Each block is a serialized knowledge
/// path and the answers it supports.
pub fn consolidation_prompt(question: &str, blocks: &[(String, Vec<String>)]) -> String {
    let mut out = String::new();
    if !blocks.is_empty() {
        out.push_str("Relevant triples:\n");
        for (path, answers) in blocks {
            out.push_str(&format!(
                "{path}. Therefore, a possible answer could be: {}\n",
                answers.join(", ")
            ));
        }
        out.push('\n');
    }
    out.push_str(&format!("Question:\n{question}\n\n{CONSOLIDATION_INSTRUCTION}"));
    out
}
