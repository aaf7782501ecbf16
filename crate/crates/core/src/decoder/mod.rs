//! KG-constrained decoding.
//!
//! [`PathAutomaton`] tracks where a partially emitted knowledge path stands
//! and which symbols may come next, so that every completed triple is a
//! member of the graph and chains onto the previous one. [`decode_beam`]
//! runs beam search over the automaton with any [`Scorer`].

mod vocab;

pub use vocab::{Refinement, TokenCursor, TokenTrie, Tokenizer, VocabError, Vocabulary};

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};

/// One structural decoding unit. The derived order (markers, then
/// entities, then relations, each by id) is the tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    AlignOpen,
    AlignClose,
    TripleOpen,
    Entity(EntityId),
    Relation(RelationId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Start,
    ExpectHead,
    ExpectRelation(EntityId),
    ExpectTail(EntityId, RelationId),
    TripleDone(EntityId),
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DecoderState {
    pub phase: Phase,
    /// Completed triples, in emission order.
    pub emitted: Vec<Triple>,
}

impl DecoderState {
    pub fn start() -> Self {
        Self {
            phase: Phase::Start,
            emitted: Vec::new(),
        }
    }

    /// Tail of the last completed triple.
    pub fn frontier(&self) -> Option<EntityId> {
        self.emitted.last().map(|t| t.tail)
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("no topic entities given")]
    NoTopic,
    #[error("topic entity {0:?} is not in the graph")]
    UnknownTopic(EntityId),
    #[error("beam size and max triples must be at least 1")]
    ZeroBound,
    #[error("symbol {symbol:?} not allowed in phase {phase:?}")]
    ConstraintViolation { symbol: Symbol, phase: Phase },
    #[error("scorer violated its contract: {0}")]
    ScorerContract(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("path enumeration exceeded {limit} paths")]
    ResourceLimit { limit: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ScorerError(pub String);

/// Source of continuation log-probabilities.
pub trait Scorer: Sync {
    /// Natural-log probabilities for each symbol of `allowed`, in the same
    /// order. `-inf` marks a continuation the scorer rules out.
    fn score_continuations(&self, prefix: &[Symbol], allowed: &[Symbol]) -> Result<Vec<f64>, ScorerError>;

    /// Whether calls for different beam items may run in parallel.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Equal mass on every allowed symbol.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformScorer;

impl Scorer for UniformScorer {
    fn score_continuations(&self, _prefix: &[Symbol], allowed: &[Symbol]) -> Result<Vec<f64>, ScorerError> {
        let lp = -(allowed.len() as f64).ln();
        Ok(vec![lp; allowed.len()])
    }
}

/// The triple-emission automaton for one set of topic entities.
#[derive(Clone, Debug)]
pub struct PathAutomaton<'g> {
    graph: &'g KnowledgeGraph,
    topic: Vec<EntityId>,
    max_triples: usize,
}

impl<'g> PathAutomaton<'g> {
    pub fn new(graph: &'g KnowledgeGraph, topic: &[EntityId], max_triples: usize) -> Result<Self, DecodeError> {
        if topic.is_empty() {
            return Err(DecodeError::NoTopic);
        }
        if max_triples == 0 {
            return Err(DecodeError::ZeroBound);
        }
        if let Some(&bad) = topic.iter().find(|e| e.0 as usize >= graph.num_entities()) {
            return Err(DecodeError::UnknownTopic(bad));
        }
        let mut topic = topic.to_vec();
        topic.sort_unstable();
        topic.dedup();
        Ok(Self {
            graph,
            topic,
            max_triples,
        })
    }

    pub fn graph(&self) -> &'g KnowledgeGraph {
        self.graph
    }

    pub fn topic(&self) -> &[EntityId] {
        &self.topic
    }

    pub fn max_triples(&self) -> usize {
        self.max_triples
    }

    /// Allowed next symbols, ascending.
    pub fn allowed(&self, s: &DecoderState) -> Vec<Symbol> {
        match s.phase {
            Phase::Start => vec![Symbol::AlignOpen],
            Phase::ExpectHead => match s.frontier() {
                None => self.topic.iter().map(|&e| Symbol::Entity(e)).collect(),
                Some(tail) => vec![Symbol::Entity(tail)],
            },
            Phase::ExpectRelation(head) => {
                let mut out = Vec::with_capacity(self.graph.relations_from(head).len() + 1);
                if !s.emitted.is_empty() {
                    out.push(Symbol::AlignClose);
                }
                out.extend(self.graph.relations_from(head).iter().map(|&r| Symbol::Relation(r)));
                out
            }
            Phase::ExpectTail(head, relation) => self
                .graph
                .objects_of(head, relation)
                .iter()
                .map(|&e| Symbol::Entity(e))
                .collect(),
            Phase::TripleDone(_) if s.emitted.len() >= self.max_triples => vec![Symbol::AlignClose],
            Phase::TripleDone(_) => vec![Symbol::AlignClose, Symbol::TripleOpen],
            Phase::Done => Vec::new(),
        }
    }

    pub fn is_allowed(&self, s: &DecoderState, symbol: Symbol) -> bool {
        self.allowed(s).binary_search(&symbol).is_ok()
    }

    /// Advances the automaton by one symbol.
    pub fn step(&self, s: &DecoderState, symbol: Symbol) -> Result<DecoderState, DecodeError> {
        if !self.is_allowed(s, symbol) {
            return Err(DecodeError::ConstraintViolation {
                symbol,
                phase: s.phase,
            });
        }
        let mut next = s.clone();
        next.phase = match (s.phase, symbol) {
            (Phase::Start, Symbol::AlignOpen) => Phase::ExpectHead,
            (Phase::ExpectHead, Symbol::Entity(e)) => Phase::ExpectRelation(e),
            (Phase::ExpectRelation(h), Symbol::Relation(r)) => Phase::ExpectTail(h, r),
            (Phase::ExpectRelation(_), Symbol::AlignClose) => Phase::Done,
            (Phase::ExpectTail(h, r), Symbol::Entity(t)) => {
                next.emitted.push(Triple::new(h, r, t));
                Phase::TripleDone(t)
            }
            (Phase::TripleDone(_), Symbol::TripleOpen) => Phase::ExpectHead,
            (Phase::TripleDone(_), Symbol::AlignClose) => Phase::Done,
            _ => unreachable!("allowed set admits only listed transitions"),
        };
        Ok(next)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    pub symbols: Vec<Symbol>,
    pub state: DecoderState,
    /// Sum of per-step scorer log-probabilities.
    pub logp: f64,
}

impl ScoredSequence {
    pub fn path(&self) -> &[Triple] {
        &self.state.emitted
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Diagnostic {
    /// Nothing could be decoded from the topic entities.
    NoPath,
    /// The path of the given result revisits an entity.
    Cycle { sequence: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeOutput {
    pub sequences: Vec<ScoredSequence>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Beam width that never prunes.
pub const UNBOUNDED_BEAM: usize = usize::MAX;

fn rank(a: &ScoredSequence, b: &ScoredSequence) -> Ordering {
    b.logp.total_cmp(&a.logp).then_with(|| a.symbols.cmp(&b.symbols))
}

fn checked_scores(scorer: &dyn Scorer, prefix: &[Symbol], allowed: &[Symbol]) -> Result<Vec<f64>, DecodeError> {
    let scores = scorer.score_continuations(prefix, allowed)?;
    if scores.len() != allowed.len() {
        return Err(DecodeError::ScorerContract(format!(
            "{} scores for {} allowed symbols",
            scores.len(),
            allowed.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan() || **s == f64::INFINITY) {
        return Err(DecodeError::ScorerContract(format!("invalid log-probability {bad}")));
    }
    let mass: f64 = scores.iter().map(|s| s.exp()).sum();
    if mass > 1.0 + 1e-9 {
        return Err(DecodeError::ScorerContract(format!("probability mass {mass} exceeds 1")));
    }
    Ok(scores)
}

fn has_cycle(path: &[Triple]) -> bool {
    let mut seen = HashSet::new();
    if let Some(first) = path.first() {
        seen.insert(first.head);
    }
    path.iter().any(|t| !seen.insert(t.tail))
}

/// Beam search over the automaton.
///
/// Returns at most `beam_size` completed sequences with distinct paths,
/// best first. Sequences with equal log-probability are ordered by their
/// symbol sequence.
pub fn decode_beam(
    g: &KnowledgeGraph,
    scorer: &dyn Scorer,
    topic: &[EntityId],
    beam_size: usize,
    max_triples: usize,
) -> Result<DecodeOutput, DecodeError> {
    if beam_size == 0 {
        return Err(DecodeError::ZeroBound);
    }
    let automaton = PathAutomaton::new(g, topic, max_triples)?;
    if !automaton.topic().iter().any(|&e| g.has_outgoing(e)) {
        return Ok(DecodeOutput {
            sequences: Vec::new(),
            diagnostics: vec![Diagnostic::NoPath],
        });
    }

    let expand = |hyp: &ScoredSequence| -> Result<Vec<ScoredSequence>, DecodeError> {
        let allowed = automaton.allowed(&hyp.state);
        if allowed.is_empty() {
            return Ok(Vec::new());
        }
        let scores = checked_scores(scorer, &hyp.symbols, &allowed)?;
        let mut children = Vec::with_capacity(allowed.len());
        for (&symbol, lp) in allowed.iter().zip(scores) {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let mut symbols = hyp.symbols.clone();
            symbols.push(symbol);
            children.push(ScoredSequence {
                symbols,
                state: automaton.step(&hyp.state, symbol)?,
                logp: hyp.logp + lp,
            });
        }
        Ok(children)
    };

    let mut live = vec![ScoredSequence {
        symbols: Vec::new(),
        state: DecoderState::start(),
        logp: 0.0,
    }];
    let mut finished = Vec::new();
    while !live.is_empty() {
        let expanded: Vec<Vec<ScoredSequence>> = if scorer.concurrent() {
            live.par_iter().map(expand).collect::<Result<_, _>>()?
        } else {
            live.iter().map(expand).collect::<Result<_, _>>()?
        };
        let mut next = Vec::new();
        for child in expanded.into_iter().flatten() {
            if child.state.is_done() {
                finished.push(child);
            } else {
                next.push(child);
            }
        }
        next.sort_by(rank);
        next.truncate(beam_size);
        live = next;
    }

    finished.sort_by(rank);
    let mut seen = HashSet::new();
    finished.retain(|s| seen.insert(s.state.emitted.clone()));
    finished.truncate(beam_size);

    let mut diagnostics = Vec::new();
    if finished.is_empty() {
        diagnostics.push(Diagnostic::NoPath);
    }
    for (sequence, s) in finished.iter().enumerate() {
        if has_cycle(s.path()) {
            diagnostics.push(Diagnostic::Cycle { sequence });
        }
    }
    Ok(DecodeOutput {
        sequences: finished,
        diagnostics,
    })
}

/// Every connected forward path of 1..=`max_triples` triples that starts at
/// a topic entity. Exhaustive DFS, meant for small graphs and tests.
pub fn enumerate_valid_paths(
    g: &KnowledgeGraph,
    topic: &[EntityId],
    max_triples: usize,
    limit: usize,
) -> Result<BTreeSet<Vec<Triple>>, DecodeError> {
    fn dfs(
        g: &KnowledgeGraph,
        at: EntityId,
        path: &mut Vec<Triple>,
        max: usize,
        limit: usize,
        out: &mut BTreeSet<Vec<Triple>>,
    ) -> Result<(), DecodeError> {
        if path.len() == max {
            return Ok(());
        }
        for &(relation, tail) in g.out_edges(at) {
            path.push(Triple::new(at, relation, tail));
            out.insert(path.clone());
            if out.len() > limit {
                return Err(DecodeError::ResourceLimit { limit });
            }
            dfs(g, tail, path, max, limit, out)?;
            path.pop();
        }
        Ok(())
    }

    let mut out = BTreeSet::new();
    let topic: BTreeSet<EntityId> = topic.iter().copied().collect();
    for e in topic {
        dfs(g, e, &mut Vec::new(), max_triples, limit, &mut out)?;
    }
    Ok(out)
}
