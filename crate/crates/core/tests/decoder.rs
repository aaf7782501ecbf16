mod common;

use std::collections::BTreeSet;

use common::{brute_force_paths, heads, labels, random_triples, raw_set, seeded, HashScorer};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rar_core::decoder::{
    decode_beam, enumerate_valid_paths, DecodeError, DecoderState, PathAutomaton, Phase, Symbol, UniformScorer,
    UNBOUNDED_BEAM,
};
use rar_core::kg::KnowledgeGraph;

fn surface(g: &KnowledgeGraph, s: Symbol) -> String {
    match s {
        Symbol::AlignOpen => "<ALIGN>".into(),
        Symbol::AlignClose => "</ALIGN>".into(),
        Symbol::TripleOpen => "<TRIPLE>".into(),
        Symbol::Entity(e) => g.entity_label(e).unwrap().into(),
        Symbol::Relation(r) => g.relation_label(r).unwrap().into(),
    }
}

#[test]
fn allowed_sets_match_linear_scan() {
    for trial in 0..300u64 {
        let mut rng = seeded(trial);
        let triples = random_triples(&mut rng, 60);
        let raw = raw_set(&triples);
        let g = KnowledgeGraph::from_label_triples(&triples).unwrap();
        let hs = heads(&raw);
        let topic_labels: Vec<String> = hs.choose_multiple(&mut rng, 2).cloned().collect();
        let topic: Vec<_> = topic_labels.iter().map(|l| g.entity_id(l).unwrap()).collect();
        let max = rng.gen_range(1..=4);
        let a = PathAutomaton::new(&g, &topic, max).unwrap();
        let mut state = DecoderState::start();
        while !state.is_done() {
            let allowed = a.allowed(&state);
            assert!(allowed.windows(2).all(|w| w[0] < w[1]), "allowed set must be ascending");
            let got: BTreeSet<String> = allowed.iter().map(|&s| surface(&g, s)).collect();
            let expected: BTreeSet<String> = match state.phase {
                Phase::Start => ["<ALIGN>".to_string()].into(),
                Phase::ExpectHead => match state.emitted.last() {
                    None => topic_labels.iter().cloned().collect(),
                    Some(t) => [g.entity_label(t.tail).unwrap().to_string()].into(),
                },
                Phase::ExpectRelation(h) => {
                    let h = g.entity_label(h).unwrap();
                    let mut s: BTreeSet<String> =
                        raw.iter().filter(|t| t.0 == h).map(|t| t.1.clone()).collect();
                    if !state.emitted.is_empty() {
                        s.insert("</ALIGN>".into());
                    }
                    s
                }
                Phase::ExpectTail(h, r) => {
                    let (h, r) = (g.entity_label(h).unwrap(), g.relation_label(r).unwrap());
                    raw.iter().filter(|t| t.0 == h && t.1 == r).map(|t| t.2.clone()).collect()
                }
                Phase::TripleDone(_) if state.emitted.len() >= max => ["</ALIGN>".to_string()].into(),
                Phase::TripleDone(_) => ["</ALIGN>".to_string(), "<TRIPLE>".to_string()].into(),
                Phase::Done => BTreeSet::new(),
            };
            assert_eq!(got, expected, "trial {trial}, phase {:?}", state.phase);
            if allowed.is_empty() {
                break;
            }
            let pick = *allowed.choose(&mut rng).unwrap();
            state = a.step(&state, pick).unwrap();
        }
    }
}

#[test]
fn disallowed_symbols_are_rejected() {
    let g = KnowledgeGraph::from_label_triples(&[rar_core::kg::LabelTriple::new("a", "r", "b")]).unwrap();
    let a = PathAutomaton::new(&g, &[g.entity_id("a").unwrap()], 2).unwrap();
    let s = a.step(&DecoderState::start(), Symbol::AlignOpen).unwrap();
    let b = Symbol::Entity(g.entity_id("b").unwrap());
    assert!(matches!(a.step(&s, b), Err(DecodeError::ConstraintViolation { .. })));
    assert!(matches!(
        a.step(&s, Symbol::AlignClose),
        Err(DecodeError::ConstraintViolation { .. })
    ));
}

#[test]
fn unbounded_beam_finds_the_optimum() {
    for trial in 0..100u64 {
        let mut rng = seeded(1000 + trial);
        let triples = random_triples(&mut rng, 40);
        let raw = raw_set(&triples);
        let g = KnowledgeGraph::from_label_triples(&triples).unwrap();
        let topic = vec![g.entity_id(heads(&raw).choose(&mut rng).unwrap()).unwrap()];
        let scorer = HashScorer::sparse(trial);
        let full = decode_beam(&g, &scorer, &topic, UNBOUNDED_BEAM, 3).unwrap();
        let best = full.sequences[0].logp;
        for beam in [1, 2, 5] {
            let out = decode_beam(&g, &scorer, &topic, beam, 3).unwrap();
            assert!(out.sequences.len() <= beam);
            assert!(out.sequences.iter().all(|s| s.logp <= best + 1e-12));
        }
        let logps: Vec<f64> = full.sequences.iter().map(|s| s.logp).collect();
        assert!(logps.windows(2).all(|w| w[0] >= w[1]));
        let paths: BTreeSet<_> = full.sequences.iter().map(|s| s.path().to_vec()).collect();
        assert_eq!(paths.len(), full.sequences.len(), "finished paths are distinct");
    }
}

#[test]
fn decoding_is_deterministic() {
    let mut rng = seeded(77);
    let triples = random_triples(&mut rng, 150);
    let raw = raw_set(&triples);
    let g = KnowledgeGraph::from_label_triples(&triples).unwrap();
    let topic: Vec<_> = heads(&raw).iter().take(3).map(|l| g.entity_id(l).unwrap()).collect();
    let a = decode_beam(&g, &HashScorer::sparse(5), &topic, 8, 3).unwrap();
    for _ in 0..5 {
        assert_eq!(decode_beam(&g, &HashScorer::sparse(5), &topic, 8, 3).unwrap(), a);
    }
}

#[test]
fn enumeration_matches_brute_force() {
    for trial in 0..50u64 {
        let mut rng = seeded(5000 + trial);
        let triples = random_triples(&mut rng, 80);
        let raw = raw_set(&triples);
        let g = KnowledgeGraph::from_label_triples(&triples).unwrap();
        let topic_labels = vec![heads(&raw).choose(&mut rng).unwrap().clone()];
        let topic = vec![g.entity_id(&topic_labels[0]).unwrap()];
        let got: BTreeSet<_> = enumerate_valid_paths(&g, &topic, 3, 1_000_000)
            .unwrap()
            .iter()
            .map(|p| labels(&g, p))
            .collect();
        assert_eq!(got, brute_force_paths(&raw, &topic_labels, 3));
    }
}

#[test]
fn uniform_decode_of_fixture() {
    let file = std::fs::File::open(common::fixture("fixtures/us_borders.tsv")).unwrap();
    let g = rar_core::kg::load_graph(std::io::BufReader::new(file)).unwrap();
    let out = decode_beam(&g, &UniformScorer, &[g.entity_id("US").unwrap()], 10, 1).unwrap();
    let tails: Vec<&str> = out
        .sequences
        .iter()
        .map(|s| g.entity_label(s.path()[0].tail).unwrap())
        .collect();
    assert_eq!(tails, ["Mexico", "Canada"]);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn every_decoded_triple_is_in_the_graph(seed in any::<u64>(), beam in 1usize..6, hops in 1usize..4) {
        let mut rng = seeded(seed);
        let triples = random_triples(&mut rng, 100);
        let raw = raw_set(&triples);
        let g = KnowledgeGraph::from_label_triples(&triples).unwrap();
        let topic = vec![g.entity_id(heads(&raw).choose(&mut rng).unwrap()).unwrap()];
        let out = decode_beam(&g, &HashScorer::sparse(seed), &topic, beam, hops).unwrap();
        for s in &out.sequences {
            prop_assert!(!s.path().is_empty() && s.path().len() <= hops);
            prop_assert_eq!(s.path()[0].head, topic[0]);
            for t in labels(&g, s.path()) {
                prop_assert!(raw.contains(&t));
            }
        }
    }
}
