//! The EM training loop.
//!
//! Each iteration samples `N` graph-aware chains per training question from
//! the generator, gives the Responser a chance to update, scores every
//! candidate with `S(z) = log p(a|q,z) + log p(z|G,q)`, keeps the top `K`
//! per question and refits the generator on them.
//!
//! The previous iteration's selection is re-scored under the refitted
//! generator and competes with the fresh samples. Together with a
//! generator update that never lowers the likelihood of its own training
//! set, this makes the mean selected score non-decreasing.

mod mock;

pub use mock::{MockAnswerScorer, MockGenerator, WalkScorer};

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decoder::DecodeError;
use crate::eval::{evaluate_dataset, AnswerSet, DatasetReport, EvalError};
use crate::expansion::ExpansionError;
use crate::grammar::{serialize_chain, serialize_path, validate_alignment, GraphAwareChain, GrammarError};
use crate::kg::{EntityId, KnowledgeGraph, Triple};
use crate::prompts;

#[derive(Debug, Error)]
pub enum EmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("instance {id}: no topic entity found in the graph")]
    Unlinked { id: String },
    #[error("instance {id}: no topic entity has outgoing edges")]
    NoStart { id: String },
    #[error("instance {id}: only {valid} of {wanted} candidates valid after {requested} proposals")]
    GenerationFailed {
        id: String,
        valid: usize,
        wanted: usize,
        requested: usize,
    },
    #[error("backend error: {0}")]
    Backend(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Expansion(#[from] ExpansionError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A question with linked topic entities and gold answers.
#[derive(Clone, Debug, PartialEq)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    /// Ascending, deduplicated.
    pub topic_entities: Vec<EntityId>,
    pub gold_answers: Vec<String>,
}

/// QA dataset line: `{"id", "question", "q_entities", "answers"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub q_entities: Vec<String>,
    #[serde(default)]
    pub answers: Vec<String>,
}

impl QAInstance {
    /// Links topic labels against the graph; unknown labels are skipped.
    pub fn link(rec: &QaRecord, g: &KnowledgeGraph) -> Result<Self, EmError> {
        let mut topic = Vec::new();
        for label in &rec.q_entities {
            match g.entity_id(label) {
                Some(e) => topic.push(e),
                None => log::warn!("instance {}: topic entity {label:?} not in graph", rec.id),
            }
        }
        topic.sort_unstable();
        topic.dedup();
        if topic.is_empty() {
            return Err(EmError::Unlinked { id: rec.id.clone() });
        }
        Ok(Self {
            id: rec.id.clone(),
            question: rec.question.clone(),
            topic_entities: topic,
            gold_answers: rec.answers.clone(),
        })
    }

    pub fn topic_labels<'g>(&self, g: &'g KnowledgeGraph) -> Vec<&'g str> {
        self.topic_entities
            .iter()
            .filter_map(|&e| g.entity_label(e))
            .collect()
    }
}

/// A generator output before engine-side verification.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub z: GraphAwareChain,
    pub logp_gen: f64,
}

/// A verified sample. Until [`score_candidate`] runs, `logp_ans` is 0 and
/// `score` equals `logp_gen`.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub z: GraphAwareChain,
    /// The knowledge path resolved against the graph.
    pub path: Vec<Triple>,
    pub logp_gen: f64,
    pub logp_ans: f64,
    pub score: f64,
    /// Serialized `z`; the tie-break key.
    pub key: String,
}

impl Candidate {
    fn verified(p: Proposal, inst: &QAInstance, g: &KnowledgeGraph) -> Option<Self> {
        if !p.logp_gen.is_finite() || !validate_alignment(&p.z).is_empty() {
            return None;
        }
        let path: Vec<Triple> = p
            .z
            .path
            .triples
            .iter()
            .map(|t| g.resolve_triple(t))
            .collect::<Option<_>>()?;
        if inst.topic_entities.binary_search(&path[0].head).is_err() {
            return None;
        }
        let key = p.z.serialize().ok()?;
        Some(Self {
            z: p.z,
            path,
            logp_gen: p.logp_gen,
            logp_ans: 0.0,
            score: p.logp_gen,
            key,
        })
    }
}

/// A ReAligner: proposes graph-aware chains and learns from selections.
pub trait Generator: Send + Sync {
    /// `n` proposals with the exact log-probability of each under the
    /// generator's current distribution.
    fn propose(&self, inst: &QAInstance, g: &KnowledgeGraph, n: usize, seed: u64) -> Result<Vec<Proposal>, EmError>;

    /// Refit on the selected chains.
    fn update(&mut self, g: &KnowledgeGraph, selected: &[Selection<'_>]) -> Result<(), EmError>;

    /// Log-probability of an arbitrary `z`, when the backend can compute it.
    fn log_prob(&self, _inst: &QAInstance, _g: &KnowledgeGraph, _z: &GraphAwareChain) -> Option<f64> {
        None
    }

    /// Best single chain for inference. Defaults to the most probable of
    /// `n` samples.
    fn predict(&self, inst: &QAInstance, g: &KnowledgeGraph, n: usize, seed: u64) -> Result<Option<Proposal>, EmError> {
        let mut props = self.propose(inst, g, n, seed)?;
        props.sort_by(|a, b| b.logp_gen.total_cmp(&a.logp_gen));
        Ok(props.into_iter().next())
    }

    /// Short fingerprint of the parameters.
    fn digest(&self) -> String;
}

/// A Responser: answers from a chain and scores gold answers.
pub trait AnswerScorer: Send + Sync {
    fn answer(&self, inst: &QAInstance, g: &KnowledgeGraph, c: &Candidate) -> Result<Vec<String>, EmError>;

    /// `log p(a|q,z)` of the gold answers.
    fn logp_answer(&self, inst: &QAInstance, g: &KnowledgeGraph, c: &Candidate) -> Result<f64, EmError>;

    /// Training hook; a pre-optimized Responser ignores it.
    fn update(&mut self, _dataset: &[TrainingExample]) -> Result<(), EmError> {
        Ok(())
    }

    fn pre_optimized(&self) -> bool {
        true
    }
}

/// How the E-step obtains the pool it ranks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EStepMode {
    /// Rank the samples drawn at the start of the iteration.
    #[default]
    Rerank,
    /// Draw a fresh batch after the Responser update.
    Resample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub n_samples: usize,
    pub top_k: usize,
    pub iterations: usize,
    pub seed: u64,
    /// `log ε` for candidates whose answers miss the gold set.
    pub answer_floor_logp: f64,
    pub beam_size: usize,
    pub max_hops: usize,
    pub p_stop: f64,
    pub estep: EStepMode,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_samples: 10,
            top_k: 3,
            iterations: 10,
            seed: 0,
            answer_floor_logp: 1e-6f64.ln(),
            beam_size: 10,
            max_hops: 3,
            p_stop: 0.5,
            estep: EStepMode::Rerank,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        let bad = |m: &str| Err(EmError::Config(m.to_owned()));
        if self.n_samples == 0 || self.top_k == 0 {
            return bad("n_samples and top_k must be positive");
        }
        if self.top_k > self.n_samples {
            return bad("top_k must not exceed n_samples");
        }
        if !(self.answer_floor_logp.is_finite() && self.answer_floor_logp < 0.0) {
            return bad("answer_floor_logp must be finite and negative");
        }
        if self.beam_size == 0 || self.max_hops == 0 {
            return bad("beam_size and max_hops must be positive");
        }
        if !(self.p_stop > 0.0 && self.p_stop < 1.0) {
            return bad("p_stop must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Stable seed for one unit of work.
pub fn derive_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Retry budget, as a multiple of the requested sample count.
const RETRY_FACTOR: usize = 3;

/// Draws exactly `n` verified candidates. Invalid proposals are dropped and
/// re-requested, at most `3n` proposals in total.
pub fn sample_candidates(
    gen: &dyn Generator,
    inst: &QAInstance,
    g: &KnowledgeGraph,
    n: usize,
    seed: u64,
) -> Result<Vec<Candidate>, EmError> {
    let budget = RETRY_FACTOR * n;
    let mut out = Vec::with_capacity(n);
    let mut requested = 0;
    let mut round = 0u64;
    while out.len() < n {
        if requested >= budget {
            return Err(EmError::GenerationFailed {
                id: inst.id.clone(),
                valid: out.len(),
                wanted: n,
                requested,
            });
        }
        let ask = (n - out.len()).min(budget - requested);
        let round_seed = if round == 0 {
            seed
        } else {
            derive_seed(seed, &[b"retry", &round.to_le_bytes()])
        };
        let proposals = gen.propose(inst, g, ask, round_seed)?;
        requested += ask;
        round += 1;
        for p in proposals.into_iter().take(ask) {
            match Candidate::verified(p, inst, g) {
                Some(c) => out.push(c),
                None => log::warn!("instance {}: rejected invalid proposal", inst.id),
            }
        }
    }
    Ok(out)
}

/// Fills in the answer term and `S(z)`.
pub fn score_candidate(
    sc: &dyn AnswerScorer,
    inst: &QAInstance,
    g: &KnowledgeGraph,
    mut c: Candidate,
) -> Result<Candidate, EmError> {
    c.logp_ans = sc.logp_answer(inst, g, &c)?;
    c.score = c.logp_gen + c.logp_ans;
    Ok(c)
}

/// Highest scores first; equal scores by serialized chain.
pub fn rank_candidates(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.key.cmp(&b.key))
}

pub fn select_top_k(mut cands: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    cands.sort_by(rank_candidates);
    cands.truncate(k);
    cands
}

/// Candidates attached to the question they answer.
#[derive(Clone, Debug)]
pub struct Selection<'a> {
    pub instance: &'a QAInstance,
    pub candidates: Vec<Candidate>,
}

/// Prompt/completion pair for instruction tuning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prompt: String,
    pub completion: String,
}

fn serialized_parts(z: &GraphAwareChain) -> Result<(String, String), EmError> {
    Ok((serialize_chain(&z.chain)?, serialize_path(&z.path)?))
}

/// One ReAligner example per selected chain.
pub fn emit_realigner_dataset(selected: &[Selection<'_>], g: &KnowledgeGraph) -> Result<Vec<TrainingExample>, EmError> {
    let mut out = Vec::new();
    for s in selected {
        let prompt = prompts::realigner_prompt(&s.instance.question, &s.instance.topic_labels(g));
        for c in &s.candidates {
            let (chain, path) = serialized_parts(&c.z)?;
            out.push(TrainingExample {
                prompt: prompt.clone(),
                completion: prompts::realigner_completion(&chain, &path),
            });
        }
    }
    Ok(out)
}

/// One Responser example per sampled chain, completed with the gold answers.
pub fn emit_responser_dataset(samples: &[Selection<'_>], g: &KnowledgeGraph) -> Result<Vec<TrainingExample>, EmError> {
    let mut out = Vec::new();
    for s in samples {
        let entities = s.instance.topic_labels(g);
        let completion = prompts::responser_completion(&s.instance.gold_answers);
        for c in &s.candidates {
            let (chain, path) = serialized_parts(&c.z)?;
            out.push(TrainingExample {
                prompt: prompts::responser_prompt(&s.instance.question, &entities, &chain, &path),
                completion: completion.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub best_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub best_scores: Vec<InstanceScore>,
    pub mean_best_score: f64,
    /// Mean `S(z)` over every selected candidate.
    pub selected_mean_score: f64,
    /// Dev metrics with the generator this iteration started from.
    pub dev_before: DatasetReport,
    /// Dev metrics after the generator update.
    pub dev_after: DatasetReport,
    pub generator_digest: String,
}

/// Mutable training state.
pub struct EmState<G, A> {
    pub generator: G,
    pub responser: A,
    pub iteration: usize,
    carried: HashMap<String, Vec<Candidate>>,
    samples: HashMap<String, Vec<Candidate>>,
    dev_cache: Option<DatasetReport>,
}

impl<G: Generator, A: AnswerScorer> EmState<G, A> {
    pub fn new(generator: G, responser: A) -> Self {
        Self {
            generator,
            responser,
            iteration: 0,
            carried: HashMap::new(),
            samples: HashMap::new(),
            dev_cache: None,
        }
    }

    /// The last iteration's top-K per instance, in `train` order.
    pub fn selected<'a>(&self, train: &'a [QAInstance]) -> Vec<Selection<'a>> {
        attach(train, &self.carried)
    }

    /// The last iteration's fresh samples per instance, in `train` order.
    pub fn samples<'a>(&self, train: &'a [QAInstance]) -> Vec<Selection<'a>> {
        attach(train, &self.samples)
    }
}

fn attach<'a>(train: &'a [QAInstance], by_id: &HashMap<String, Vec<Candidate>>) -> Vec<Selection<'a>> {
    train
        .iter()
        .filter_map(|instance| {
            by_id.get(&instance.id).map(|c| Selection {
                instance,
                candidates: c.clone(),
            })
        })
        .collect()
}

/// Inference: the generator's best chain answered by the Responser.
pub fn predict_answers(
    gen: &dyn Generator,
    sc: &dyn AnswerScorer,
    inst: &QAInstance,
    g: &KnowledgeGraph,
    config: &EmConfig,
) -> Result<Vec<String>, EmError> {
    let seed = derive_seed(config.seed, &[b"predict", inst.id.as_bytes()]);
    let Some(p) = gen.predict(inst, g, config.beam_size, seed)? else {
        return Ok(Vec::new());
    };
    match Candidate::verified(p, inst, g) {
        Some(c) => sc.answer(inst, g, &c),
        None => Ok(Vec::new()),
    }
}

pub fn evaluate_generator(
    gen: &dyn Generator,
    sc: &dyn AnswerScorer,
    dev: &[QAInstance],
    g: &KnowledgeGraph,
    config: &EmConfig,
) -> Result<DatasetReport, EmError> {
    let pairs: Vec<(AnswerSet, AnswerSet)> = dev
        .par_iter()
        .map(|inst| {
            let pred = predict_answers(gen, sc, inst, g, config)?;
            Ok((AnswerSet::new(pred), AnswerSet::new(&inst.gold_answers)))
        })
        .collect::<Result<_, EmError>>()?;
    Ok(evaluate_dataset(&pairs)?)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One pass of sample, Responser hook, E-step and M-step.
pub fn run_iteration<G: Generator, A: AnswerScorer>(
    state: &mut EmState<G, A>,
    train: &[QAInstance],
    dev: &[QAInstance],
    g: &KnowledgeGraph,
    config: &EmConfig,
) -> Result<IterationReport, EmError> {
    config.validate()?;
    let t = state.iteration as u64;
    let dev_before = match state.dev_cache.take() {
        Some(r) => r,
        None => evaluate_generator(&state.generator, &state.responser, dev, g, config)?,
    };

    let draw = |tag: &[u8]| -> Result<Vec<Vec<Candidate>>, EmError> {
        train
            .par_iter()
            .map(|inst| {
                let seed = derive_seed(config.seed, &[tag, &t.to_le_bytes(), inst.id.as_bytes()]);
                sample_candidates(&state.generator, inst, g, config.n_samples, seed)
            })
            .collect()
    };
    let samples = draw(b"sample")?;

    if !state.responser.pre_optimized() {
        let sel: Vec<Selection<'_>> = train
            .iter()
            .zip(&samples)
            .map(|(instance, c)| Selection {
                instance,
                candidates: c.clone(),
            })
            .collect();
        let dataset = emit_responser_dataset(&sel, g)?;
        state.responser.update(&dataset)?;
    }

    state.samples = train.iter().map(|i| i.id.clone()).zip(samples.iter().cloned()).collect();
    let pools = match config.estep {
        EStepMode::Rerank => samples,
        EStepMode::Resample => draw(b"resample")?,
    };

    let generator = &state.generator;
    let responser = &state.responser;
    let carried = &state.carried;
    let selected: Vec<Vec<Candidate>> = train
        .par_iter()
        .zip(pools)
        .map(|(inst, mut pool)| {
            for prev in carried.get(&inst.id).into_iter().flatten() {
                if let Some(lp) = generator.log_prob(inst, g, &prev.z) {
                    let mut c = prev.clone();
                    c.logp_gen = lp;
                    pool.push(c);
                }
            }
            let scored = pool
                .into_iter()
                .map(|c| score_candidate(responser, inst, g, c))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(select_top_k(scored, config.top_k))
        })
        .collect::<Result<_, EmError>>()?;

    let best_scores: Vec<InstanceScore> = train
        .iter()
        .zip(&selected)
        .map(|(inst, sel)| InstanceScore {
            id: inst.id.clone(),
            best_score: sel.first().map_or(f64::NEG_INFINITY, |c| c.score),
        })
        .collect();
    let selected_mean_score = mean(selected.iter().flatten().map(|c| c.score));

    let selections: Vec<Selection<'_>> = train
        .iter()
        .zip(&selected)
        .map(|(instance, c)| Selection {
            instance,
            candidates: c.clone(),
        })
        .collect();
    state.generator.update(g, &selections)?;
    state.carried = train
        .iter()
        .map(|inst| inst.id.clone())
        .zip(selected)
        .collect();

    let dev_after = evaluate_generator(&state.generator, &state.responser, dev, g, config)?;
    state.dev_cache = Some(dev_after);
    state.iteration += 1;

    Ok(IterationReport {
        iteration: t as usize,
        mean_best_score: mean(best_scores.iter().map(|b| b.best_score)),
        best_scores,
        selected_mean_score,
        dev_before,
        dev_after,
        generator_digest: state.generator.digest(),
    })
}

/// Stop once the mean best score improved by less than this for two
/// consecutive iterations.
pub const CONVERGENCE_TOL: f64 = 1e-6;

pub fn run_em<G: Generator, A: AnswerScorer>(
    state: &mut EmState<G, A>,
    train: &[QAInstance],
    dev: &[QAInstance],
    g: &KnowledgeGraph,
    config: &EmConfig,
) -> Result<Vec<IterationReport>, EmError> {
    config.validate()?;
    let mut reports: Vec<IterationReport> = Vec::new();
    let mut flat = 0;
    for _ in 0..config.iterations {
        let report = run_iteration(state, train, dev, g, config)?;
        if let Some(prev) = reports.last() {
            if report.mean_best_score - prev.mean_best_score < CONVERGENCE_TOL {
                flat += 1;
            } else {
                flat = 0;
            }
        }
        reports.push(report);
        if flat >= 2 {
            break;
        }
    }
    Ok(reports)
}

/// Labels of the entities a generated path can answer with.
pub fn answer_labels(g: &KnowledgeGraph, answers: &BTreeSet<EntityId>) -> Vec<String> {
    answers
        .iter()
        .filter_map(|&e| g.entity_label(e))
        .map(str::to_owned)
        .collect()
}
