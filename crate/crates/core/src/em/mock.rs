//! Deterministic in-process backends for the EM loop.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Candidate, EmConfig, EmError, Generator, Proposal, QAInstance, Selection, AnswerScorer};
use crate::decoder::{decode_beam, Scorer, ScorerError, Symbol};
use crate::eval::AnswerSet;
use crate::expansion::expand_answers;
use crate::grammar::{GraphAwareChain, KnowledgePath, ReasoningChain};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};

/// A random-walk ReAligner.
///
/// A walk starts at a uniformly chosen topic entity with outgoing edges,
/// picks a relation with probability proportional to its weight among the
/// relations leaving the current entity, then a uniform tail. After each
/// hop it stops with probability `p_stop`, and always stops at `max_hops`
/// or at an entity without outgoing edges. Each hop contributes one
/// reasoning step, `Find the {relation} of {head}.`
///
/// Relation weights are add-one smoothed counts over the last selection.
#[derive(Clone, Debug, PartialEq)]
pub struct MockGenerator {
    weights: Vec<f64>,
    alpha: f64,
    p_stop: f64,
    max_hops: usize,
}

/// Halvings tried before an update is abandoned.
const MAX_BACKTRACK: usize = 20;

impl MockGenerator {
    pub fn new(g: &KnowledgeGraph, p_stop: f64, max_hops: usize) -> Self {
        let alpha = 1.0;
        Self {
            weights: vec![alpha; g.num_relations()],
            alpha,
            p_stop,
            max_hops,
        }
    }

    pub fn from_config(g: &KnowledgeGraph, config: &EmConfig) -> Self {
        Self::new(g, config.p_stop, config.max_hops)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn p_stop(&self) -> f64 {
        self.p_stop
    }

    pub fn max_hops(&self) -> usize {
        self.max_hops
    }

    fn starts(inst: &QAInstance, g: &KnowledgeGraph) -> Vec<EntityId> {
        inst.topic_entities.iter().copied().filter(|&e| g.has_outgoing(e)).collect()
    }

    fn relation_logp(weights: &[f64], g: &KnowledgeGraph, head: EntityId, r: RelationId) -> f64 {
        let total: f64 = g.relations_from(head).iter().map(|x| weights[x.0 as usize]).sum();
        (weights[r.0 as usize] / total).ln()
    }

    fn stop_logp(&self, g: &KnowledgeGraph, hops: usize, at: EntityId, stop: bool) -> f64 {
        let forced = hops >= self.max_hops || !g.has_outgoing(at);
        match (forced, stop) {
            (true, true) => 0.0,
            (true, false) => f64::NEG_INFINITY,
            (false, true) => self.p_stop.ln(),
            (false, false) => (1.0 - self.p_stop).ln(),
        }
    }

    /// Exact log-probability of a walk under `weights`; `-inf` if the walk
    /// cannot be produced.
    fn walk_logp(&self, weights: &[f64], inst: &QAInstance, g: &KnowledgeGraph, path: &[Triple]) -> f64 {
        let starts = Self::starts(inst, g);
        let Some(first) = path.first() else {
            return f64::NEG_INFINITY;
        };
        if path.len() > self.max_hops || !starts.contains(&first.head) {
            return f64::NEG_INFINITY;
        }
        let mut lp = -(starts.len() as f64).ln();
        for (i, t) in path.iter().enumerate() {
            if i > 0 && t.head != path[i - 1].tail {
                return f64::NEG_INFINITY;
            }
            let tails = g.objects_of(t.head, t.relation);
            if tails.binary_search(&t.tail).is_err() {
                return f64::NEG_INFINITY;
            }
            lp += Self::relation_logp(weights, g, t.head, t.relation);
            lp -= (tails.len() as f64).ln();
            lp += self.stop_logp(g, i + 1, t.tail, i + 1 == path.len());
        }
        lp
    }

    fn chain_for(g: &KnowledgeGraph, path: &[Triple]) -> ReasoningChain {
        ReasoningChain::new(path.iter().map(|t| {
            format!(
                "Find the {} of {}.",
                g.relation_label(t.relation).unwrap_or_default(),
                g.entity_label(t.head).unwrap_or_default()
            )
        }))
    }

    fn to_chain(g: &KnowledgeGraph, path: &[Triple]) -> GraphAwareChain {
        GraphAwareChain::new(
            Self::chain_for(g, path),
            KnowledgePath::new(path.iter().filter_map(|&t| g.label_triple(t)).collect()),
        )
    }

    fn sample_walk(&self, starts: &[EntityId], g: &KnowledgeGraph, rng: &mut ChaCha8Rng) -> Vec<Triple> {
        let mut at = starts[rng.gen_range(0..starts.len())];
        let mut path = Vec::new();
        loop {
            let rels = g.relations_from(at);
            let dist = WeightedIndex::new(rels.iter().map(|r| self.weights[r.0 as usize]))
                .expect("weights are positive");
            let r = rels[dist.sample(rng)];
            let tails = g.objects_of(at, r);
            let tail = tails[rng.gen_range(0..tails.len())];
            path.push(Triple::new(at, r, tail));
            at = tail;
            if path.len() >= self.max_hops || !g.has_outgoing(at) || rng.gen::<f64>() < self.p_stop {
                return path;
            }
        }
    }

    /// Log-likelihood of a selection under `weights`.
    fn selection_ll(&self, weights: &[f64], g: &KnowledgeGraph, selected: &[Selection<'_>]) -> f64 {
        selected
            .iter()
            .flat_map(|s| s.candidates.iter().map(move |c| self.walk_logp(weights, s.instance, g, &c.path)))
            .sum()
    }
}

impl Generator for MockGenerator {
    fn propose(&self, inst: &QAInstance, g: &KnowledgeGraph, n: usize, seed: u64) -> Result<Vec<Proposal>, EmError> {
        let starts = Self::starts(inst, g);
        if starts.is_empty() {
            return Err(EmError::NoStart { id: inst.id.clone() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let path = self.sample_walk(&starts, g, &mut rng);
                Proposal {
                    logp_gen: self.walk_logp(&self.weights, inst, g, &path),
                    z: Self::to_chain(g, &path),
                }
            })
            .collect())
    }

    /// Fits smoothed relation counts to the selection. An update that
    /// would lower the selection's likelihood is shrunk towards the current
    /// weights until it does not, or dropped.
    fn update(&mut self, g: &KnowledgeGraph, selected: &[Selection<'_>]) -> Result<(), EmError> {
        let mut target = vec![self.alpha; self.weights.len()];
        for c in selected.iter().flat_map(|s| &s.candidates) {
            for t in &c.path {
                target[t.relation.0 as usize] += 1.0;
            }
        }
        let baseline = self.selection_ll(&self.weights, g, selected);
        let mut step = 1.0;
        for _ in 0..=MAX_BACKTRACK {
            let trial: Vec<f64> = self
                .weights
                .iter()
                .zip(&target)
                .map(|(w, t)| w + step * (t - w))
                .collect();
            if self.selection_ll(&trial, g, selected) >= baseline {
                self.weights = trial;
                return Ok(());
            }
            step /= 2.0;
        }
        log::debug!("generator update rejected; keeping current weights");
        Ok(())
    }

    fn log_prob(&self, inst: &QAInstance, g: &KnowledgeGraph, z: &GraphAwareChain) -> Option<f64> {
        let path: Vec<Triple> = z.path.triples.iter().map(|t| g.resolve_triple(t)).collect::<Option<_>>()?;
        if z.chain != Self::chain_for(g, &path) {
            return Some(f64::NEG_INFINITY);
        }
        Some(self.walk_logp(&self.weights, inst, g, &path))
    }

    /// Top-1 beam decode under the walk distribution.
    fn predict(&self, inst: &QAInstance, g: &KnowledgeGraph, beam: usize, _seed: u64) -> Result<Option<Proposal>, EmError> {
        let scorer = WalkScorer::new(self, inst, g);
        let out = decode_beam(g, &scorer, &inst.topic_entities, beam, self.max_hops)?;
        Ok(out.sequences.first().map(|s| Proposal {
            z: Self::to_chain(g, s.path()),
            logp_gen: s.logp,
        }))
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.weights {
            h.update(w.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// The walk distribution of a [`MockGenerator`] as per-symbol scores, so
/// that constrained decoding ranks paths by their exact walk probability.
pub struct WalkScorer<'a> {
    gen: &'a MockGenerator,
    g: &'a KnowledgeGraph,
    starts: Vec<EntityId>,
}

impl<'a> WalkScorer<'a> {
    pub fn new(gen: &'a MockGenerator, inst: &QAInstance, g: &'a KnowledgeGraph) -> Self {
        Self {
            gen,
            g,
            starts: MockGenerator::starts(inst, g),
        }
    }
}

impl Scorer for WalkScorer<'_> {
    fn score_continuations(&self, prefix: &[Symbol], allowed: &[Symbol]) -> Result<Vec<f64>, ScorerError> {
        let emitted = prefix.iter().filter(|s| matches!(s, Symbol::TripleOpen)).count() + 1;
        let last = prefix.last().copied();
        let before = prefix.len().checked_sub(2).map(|i| prefix[i]);
        let score = |sym: &Symbol| -> f64 {
            match (last, sym) {
                (None, _) | (Some(Symbol::TripleOpen), _) => 0.0,
                (Some(Symbol::AlignOpen), Symbol::Entity(e)) => {
                    if self.starts.contains(e) {
                        -(self.starts.len() as f64).ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }
                (Some(Symbol::Entity(head)), Symbol::Relation(r))
                    if !matches!(before, Some(Symbol::Relation(_))) =>
                {
                    MockGenerator::relation_logp(&self.gen.weights, self.g, head, *r)
                }
                (Some(Symbol::Relation(r)), Symbol::Entity(_)) => {
                    let head = match before {
                        Some(Symbol::Entity(h)) => h,
                        _ => return f64::NEG_INFINITY,
                    };
                    -(self.g.objects_of(head, r).len() as f64).ln()
                }
                (Some(Symbol::Entity(tail)), Symbol::AlignClose) if matches!(before, Some(Symbol::Relation(_))) => {
                    self.gen.stop_logp(self.g, emitted, tail, true)
                }
                (Some(Symbol::Entity(tail)), Symbol::TripleOpen) => self.gen.stop_logp(self.g, emitted, tail, false),
                _ => f64::NEG_INFINITY,
            }
        };
        Ok(allowed.iter().map(score).collect())
    }
}

/// A pre-trained Responser stand-in: answers by expanding the chain's path
/// and gives `log p(a|q,z)` of 0 when that answer set meets the gold set
/// and the floor otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct MockAnswerScorer {
    floor: f64,
}

impl MockAnswerScorer {
    pub fn new(floor: f64) -> Self {
        Self { floor }
    }
}

impl AnswerScorer for MockAnswerScorer {
    fn answer(&self, _inst: &QAInstance, g: &KnowledgeGraph, c: &Candidate) -> Result<Vec<String>, EmError> {
        let tails = expand_answers(std::slice::from_ref(&c.path), g)?;
        Ok(super::answer_labels(g, &tails))
    }

    fn logp_answer(&self, inst: &QAInstance, g: &KnowledgeGraph, c: &Candidate) -> Result<f64, EmError> {
        let predicted = AnswerSet::new(self.answer(inst, g, c)?);
        let gold = AnswerSet::new(&inst.gold_answers);
        Ok(if predicted.intersection_len(&gold) > 0 {
            0.0
        } else {
            self.floor
        })
    }
}
