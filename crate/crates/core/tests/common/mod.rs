//! Random graphs and brute-force oracles shared by the integration tests.
//! The oracles work on plain label triples and never use the store's
//! indexes.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rar_core::decoder::{Scorer, ScorerError, Symbol};
use rar_core::grammar::{KnowledgePath, ReasoningChain};
use rar_core::kg::{KnowledgeGraph, LabelTriple};

pub type Raw = (String, String, String);

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)
}

/// A random multigraph with up to `max_triples` triples.
pub fn random_triples(rng: &mut ChaCha8Rng, max_triples: usize) -> Vec<LabelTriple> {
    let entities = rng.gen_range(3..=30);
    let relations = rng.gen_range(1..=5);
    let n = rng.gen_range(1..=max_triples);
    (0..n)
        .map(|_| {
            LabelTriple::new(
                format!("e{}", rng.gen_range(0..entities)),
                format!("r{}", rng.gen_range(0..relations)),
                format!("e{}", rng.gen_range(0..entities)),
            )
        })
        .collect()
}

pub fn raw_set(triples: &[LabelTriple]) -> HashSet<Raw> {
    triples
        .iter()
        .map(|t| (t.head.clone(), t.relation.clone(), t.tail.clone()))
        .collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every path of 1..=`max_hops` connected triples starting at a topic
/// label, by repeated extension over the full triple list.
pub fn brute_force_paths(triples: &HashSet<Raw>, topic: &[String], max_hops: usize) -> BTreeSet<Vec<Raw>> {
    let mut sorted: Vec<&Raw> = triples.iter().collect();
    sorted.sort();
    let mut frontier: Vec<Vec<Raw>> = Vec::new();
    for t in &sorted {
        if topic.contains(&t.0) {
            frontier.push(vec![(*t).clone()]);
        }
    }
    let mut all: BTreeSet<Vec<Raw>> = frontier.iter().cloned().collect();
    for _ in 1..max_hops {
        let mut next = Vec::new();
        for p in &frontier {
            let tail = &p.last().unwrap().2;
            for t in &sorted {
                if &t.0 == tail {
                    let mut q = p.clone();
                    q.push((*t).clone());
                    next.push(q);
                }
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

/// Deterministic pseudo-random scorer: weights hashed from the prefix and
/// symbol, normalized over the allowed set. The sparse form rules some
/// symbols out.
pub struct HashScorer {
    pub seed: u64,
    pub sparse: bool,
}

impl HashScorer {
    pub fn sparse(seed: u64) -> Self {
        Self { seed, sparse: true }
    }

    pub fn dense(seed: u64) -> Self {
        Self { seed, sparse: false }
    }
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51afd7ed558ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ceb9fe1a85ec53);
    x ^ (x >> 33)
}

fn code(s: &Symbol) -> u64 {
    match s {
        Symbol::AlignOpen => 1,
        Symbol::AlignClose => 2,
        Symbol::TripleOpen => 3,
        Symbol::Entity(e) => 16 + 2 * e.0 as u64,
        Symbol::Relation(r) => 17 + 2 * r.0 as u64,
    }
}

impl Scorer for HashScorer {
    fn score_continuations(&self, prefix: &[Symbol], allowed: &[Symbol]) -> Result<Vec<f64>, ScorerError> {
        let h = prefix.iter().fold(mix(self.seed), |acc, s| mix(acc ^ code(s)));
        let mut weights: Vec<f64> = allowed
            .iter()
            .map(|s| {
                let v = mix(h ^ code(s).wrapping_mul(0x9e3779b97f4a7c15));
                if self.sparse && v.is_multiple_of(7) && allowed.len() > 1 {
                    0.0
                } else {
                    (v >> 11) as f64 / (1u64 << 53) as f64 + 1e-3
                }
            })
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            weights[0] = 1.0;
        }
        let total: f64 = weights.iter().sum();
        Ok(weights.iter().map(|w| (w / total).ln()).collect())
    }
}

pub fn labels(g: &KnowledgeGraph, path: &[rar_core::kg::Triple]) -> Vec<Raw> {
    path.iter()
        .map(|&t| {
            let l = g.label_triple(t).unwrap();
            (l.head, l.relation, l.tail)
        })
        .collect()
}

/// Labels of entities that occur as a head somewhere.
pub fn heads(triples: &HashSet<Raw>) -> Vec<String> {
    let set: BTreeSet<&String> = triples.iter().map(|t| &t.0).collect();
    set.into_iter().cloned().collect()
}

/// Hand-computed `(prediction, gold, hit, precision, recall, f1)` cases.
/// Fractions are written as `(numerator, denominator)`.
pub type MetricCase = (&'static [&'static str], &'static [&'static str], bool, (u32, u32), (u32, u32), (u32, u32));

pub const METRIC_TABLE: [MetricCase; 10] = [
    (&["Physician"], &["physician"], true, (1, 1), (1, 1), (1, 1)),
    (&[], &["Paris"], false, (0, 1), (0, 1), (0, 1)),
    (&["a", "b"], &["b", "c"], true, (1, 2), (1, 2), (1, 2)),
    (&["a"], &["a", "b", "c", "d"], true, (1, 1), (1, 4), (2, 5)),
    (&["a", "b", "c", "d"], &["a"], true, (1, 4), (1, 1), (2, 5)),
    (&["x", "y"], &["a"], false, (0, 1), (0, 1), (0, 1)),
    (&["New  York", " new york "], &["New York"], true, (1, 1), (1, 1), (1, 1)),
    (&["a", "b", "c"], &["a", "b"], true, (2, 3), (1, 1), (4, 5)),
    (&["a", "b"], &["a", "b", "c", "d", "e"], true, (1, 1), (2, 5), (4, 7)),
    (&["Paris"], &["paris", "Lyon", "Nice"], true, (1, 1), (1, 3), (1, 2)),
];

pub fn frac((n, d): (u32, u32)) -> f64 {
    n as f64 / d as f64
}

/// Answers of `path` by scanning every triple for the final head and
/// relation, after checking the prefix triples exist.
pub fn brute_force_expand(triples: &HashSet<Raw>, path: &[Raw]) -> Option<BTreeSet<String>> {
    let (last, prefix) = path.split_last()?;
    if !prefix.iter().all(|t| triples.contains(t)) {
        return None;
    }
    Some(
        triples
            .iter()
            .filter(|t| t.0 == last.0 && t.1 == last.1)
            .map(|t| t.2.clone())
            .collect(),
    )
}

/// Collapse by pairing every edge into a mediator with every edge out of
/// it. Plain triples are kept; mediator-to-mediator edges vanish.
pub fn brute_force_collapse(raw: &[Raw], is_cvt: impl Fn(&str) -> bool) -> Vec<Raw> {
    let mut out = Vec::new();
    for a in raw {
        match (is_cvt(&a.0), is_cvt(&a.2)) {
            (false, false) => out.push(a.clone()),
            (false, true) => {
                for b in raw {
                    if b.0 == a.2 && !is_cvt(&b.2) {
                        out.push((a.0.clone(), format!("{}-{}", a.1, b.1), b.2.clone()));
                    }
                }
            }
            _ => {}
        }
    }
    out
}

pub const MARKERS: [&str; 9] = [
    "<THINK>", "</THINK>", "<ALIGN>", "</ALIGN>", "<TRIPLE>", "</TRIPLE>", "<|>", "<TRI>", "</TRI>",
];

/// Labels drawn from an alphabet rich in delimiter characters.
pub fn label() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,()<>|/._'-]{1,14}"
        .prop_map(|s| s.trim().to_owned())
        .prop_filter("valid label", |s| !s.is_empty() && !MARKERS.iter().any(|m| s.contains(m)))
}

pub fn step() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,.?()<>|'é-]{1,40}"
        .prop_map(|s| s.trim().to_owned())
        .prop_filter("valid step", |s| !s.is_empty() && !MARKERS[..7].iter().any(|m| s.contains(m)))
}

pub fn path() -> impl Strategy<Value = KnowledgePath> {
    (1usize..5)
        .prop_flat_map(|n| (prop::collection::vec(label(), n + 1), prop::collection::vec(label(), n)))
        .prop_map(|(entities, relations)| {
            KnowledgePath::new(
                relations
                    .iter()
                    .enumerate()
                    .map(|(i, r)| LabelTriple::new(entities[i].clone(), r.clone(), entities[i + 1].clone()))
                    .collect(),
            )
        })
}

pub fn chain() -> impl Strategy<Value = ReasoningChain> {
    prop::collection::vec(step(), 1..6).prop_map(ReasoningChain::new)
}
