//! Knowledge-graph question answering by reasoning, aligning and responding.
//!
//! A generator writes a reasoning chain together with a knowledge path that
//! is constrained to exist in the graph; the path is expanded into a set
//! of candidate answers, and an EM loop trains the generator on the chains
//! whose answers turn out right.

pub mod consolidation;
pub mod decoder;
pub mod em;
pub mod eval;
pub mod expansion;
pub mod grammar;
pub mod kg;
pub mod prompts;
pub mod synthetic;
pub mod bridge;
pub mod cli;
