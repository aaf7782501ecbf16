//! A small deterministic world for exercising the EM loop end to end.
//!
//! Thirty entities: eight countries with capitals, four currencies, six
//! people and four occupations. Forty questions over five templates, most
//! of them one hop. Ten questions, spread over all templates, are held out
//! as dev.
//!
//! Triples are listed so that distractor relations are interned first.
//! An untrained generator therefore breaks ties towards the wrong answer,
//! and any gain has to come from training.

use crate::em::QaRecord;
use crate::kg::LabelTriple;

const COUNTRIES: [&str; 8] = [
    "Avalon", "Borduria", "Carpania", "Drakonia", "Elbonia", "Florin", "Genovia", "Hyrkania",
];
const CAPITALS: [&str; 8] = [
    "Aster", "Brima", "Corvo", "Dunmere", "Elmstead", "Fairhaven", "Glenport", "Harrow",
];
const CURRENCIES: [&str; 4] = ["Crown", "Ducat", "Mark", "Shilling"];
const PEOPLE: [&str; 6] = ["Ada Lind", "Boris Kell", "Clara Voss", "Dmitri Sand", "Elena Moor", "Felix Rook"];
const OCCUPATIONS: [&str; 4] = ["Physician", "Engineer", "Painter", "Poet"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub triples: Vec<LabelTriple>,
    pub train: Vec<QaRecord>,
    pub dev: Vec<QaRecord>,
}

fn person_country(p: usize) -> usize {
    (3 * p + 1) % COUNTRIES.len()
}

fn person_birthplace(p: usize) -> usize {
    (5 * p + 2) % CAPITALS.len()
}

fn triples() -> Vec<LabelTriple> {
    let mut out = Vec::new();
    for (c, country) in COUNTRIES.iter().enumerate() {
        out.push(LabelTriple::new(*country, "currency", CURRENCIES[c % CURRENCIES.len()]));
    }
    for (p, person) in PEOPLE.iter().enumerate() {
        out.push(LabelTriple::new(*person, "born_in", CAPITALS[person_birthplace(p)]));
    }
    for (c, country) in COUNTRIES.iter().enumerate() {
        let n = COUNTRIES.len();
        out.push(LabelTriple::new(*country, "borders", COUNTRIES[(c + 1) % n]));
        if c % 2 == 0 {
            out.push(LabelTriple::new(*country, "borders", COUNTRIES[(c + n - 1) % n]));
        }
    }
    for (country, capital) in COUNTRIES.iter().zip(CAPITALS) {
        out.push(LabelTriple::new(*country, "capital", capital));
    }
    for (p, person) in PEOPLE.iter().enumerate() {
        out.push(LabelTriple::new(*person, "occupation", OCCUPATIONS[p % OCCUPATIONS.len()]));
        out.push(LabelTriple::new(*person, "nationality", COUNTRIES[person_country(p)]));
    }
    out
}

fn record(id: usize, question: String, entity: &str, answer: &str) -> QaRecord {
    QaRecord {
        id: format!("syn-{id:02}"),
        question,
        q_entities: vec![entity.to_owned()],
        answers: vec![answer.to_owned()],
    }
}

fn questions() -> Vec<QaRecord> {
    let mut qs = Vec::new();
    for (c, country) in COUNTRIES.iter().enumerate() {
        qs.push((format!("What is the capital of {country}?"), *country, CAPITALS[c]));
        qs.push((format!("Which city is the seat of government of {country}?"), *country, CAPITALS[c]));
    }
    for (p, person) in PEOPLE.iter().enumerate() {
        let job = OCCUPATIONS[p % OCCUPATIONS.len()];
        qs.push((format!("What is the profession of {person}?"), *person, job));
        qs.push((format!("What does {person} do for a living?"), *person, job));
        qs.push((format!("Where was {person} born?"), *person, CAPITALS[person_birthplace(p)]));
        qs.push((
            format!("Which currency is used in the country {person} is a citizen of?"),
            *person,
            CURRENCIES[person_country(p) % CURRENCIES.len()],
        ));
    }
    qs.into_iter()
        .enumerate()
        .map(|(i, (q, e, a))| record(i, q, e, a))
        .collect()
}

pub fn synthetic_task() -> SyntheticTask {
    let (dev, train): (Vec<_>, Vec<_>) = questions()
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % 4 == (i / 4) % 4);
    SyntheticTask {
        triples: triples(),
        train: train.into_iter().map(|(_, r)| r).collect(),
        dev: dev.into_iter().map(|(_, r)| r).collect(),
    }
}

impl SyntheticTask {
    /// The graph in the tab-separated load format.
    pub fn kg_tsv(&self) -> String {
        self.triples
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
            .collect()
    }

    pub fn train_jsonl(&self) -> String {
        to_jsonl(&self.train)
    }

    pub fn dev_jsonl(&self) -> String {
        to_jsonl(&self.dev)
    }
}

fn to_jsonl(records: &[QaRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}
