mod common;

use std::io::BufReader;

use common::{brute_force_collapse, random_triples, seeded, Raw};
use rand::Rng;
use rar_core::kg::{collapse_cvt, load_graph_with_cvt, parse_triples, CvtSpec, KnowledgeGraph, LabelTriple, LoadError};

fn raw(ts: &[LabelTriple]) -> Vec<Raw> {
    ts.iter().map(|t| (t.head.clone(), t.relation.clone(), t.tail.clone())).collect()
}

#[test]
fn mediator_pair_collapses_to_joined_relation() {
    let file = std::fs::File::open(common::fixture("fixtures/cvt_pair.tsv")).unwrap();
    let g = load_graph_with_cvt(BufReader::new(file), &CvtSpec::Prefix("m.".into())).unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g.num_entities(), 2);
    let t = g.label_triple(g.triples()[0]).unwrap();
    assert_eq!(
        t,
        LabelTriple::new(
            "Barack Obama",
            "government_position_held-office_position_or_title",
            "President of the United States"
        )
    );
    assert!(g.entity_id("m.0abc").is_none());
}

#[test]
fn collapse_matches_cross_product_oracle() {
    for trial in 0..200u64 {
        let mut rng = seeded(300 + trial);
        let mut triples = random_triples(&mut rng, 60);
        // Rename some entities into mediators.
        let cvt_every = rng.gen_range(2..6);
        for t in &mut triples {
            for label in [&mut t.head, &mut t.tail] {
                let n: usize = label[1..].parse().unwrap();
                if n.is_multiple_of(cvt_every) {
                    *label = format!("m.{n}");
                }
            }
        }
        let prefix = CvtSpec::Prefix("m.".into());
        let got = raw(&collapse_cvt(&triples, &prefix));
        let oracle = brute_force_collapse(&raw(&triples), |l| l.starts_with("m."));
        assert_eq!(got.len(), oracle.len(), "trial {trial}");
        let mut a = got.clone();
        let mut b = oracle.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b, "trial {trial}");
        assert!(got.iter().all(|t| !t.0.starts_with("m.") && !t.2.starts_with("m.")));
        let labelled = CvtSpec::from_labels(
            triples
                .iter()
                .flat_map(|t| [t.head.clone(), t.tail.clone()])
                .filter(|l| l.starts_with("m.")),
        );
        assert_eq!(raw(&collapse_cvt(&triples, &labelled)), got);
    }
}

#[test]
fn store_deduplicates_and_indexes() {
    let text = "# comment\nA\tr\tB\nA\tr\tB\n\nA\ts\tC\r\nB\tr\tA\n";
    let triples = parse_triples(text.as_bytes()).unwrap();
    assert_eq!(triples.len(), 4);
    let g = KnowledgeGraph::from_label_triples(&triples).unwrap();
    assert_eq!((g.num_entities(), g.num_relations(), g.len()), (3, 2, 3));
    let a = g.entity_id("A").unwrap();
    let labels: Vec<&str> = g.relations_from(a).iter().map(|&r| g.relation_label(r).unwrap()).collect();
    assert_eq!(labels, ["r", "s"]);
    for t in &triples {
        assert!(g.has_triple(g.resolve_triple(t).unwrap()));
    }
    assert!(g.resolve_triple(&LabelTriple::new("B", "s", "A")).is_none());
}

#[test]
fn malformed_input_is_reported_with_line_numbers() {
    assert!(matches!(
        parse_triples("A\tr\tB\nA\tr\n".as_bytes()),
        Err(LoadError::FieldCount { line: 2, found: 2 })
    ));
    assert!(matches!(
        parse_triples("A\t\tB\n".as_bytes()),
        Err(LoadError::EmptyField { line: 1, field: "relation" })
    ));
    assert!(matches!(
        parse_triples(&b"A\tr\t\xff\n"[..]),
        Err(LoadError::InvalidUtf8 { line: 1 })
    ));
}
