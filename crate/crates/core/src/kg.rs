//! In-memory triple store.
//!
//! A [`KnowledgeGraph`] is loaded once from a tab-separated triple file,
//! interned into dense ids and indexed for adjacency lookups. It is never
//! mutated afterwards, so it can be shared freely between threads.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense id of an entity label within one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

/// Dense id of a relation label within one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// A triple spelled out with its labels, before interning.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl LabelTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

impl fmt::Display for LabelTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("line {line}: expected 3 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: empty {field} field")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: invalid UTF-8")]
    InvalidUtf8 { line: usize },
    #[error("invalid label {label:?}: labels must be non-empty and contain no tab or newline")]
    InvalidLabel { label: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Bijective label table.
#[derive(Clone, Debug, Default)]
struct Interner {
    labels: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_owned());
        self.ids.insert(label.to_owned(), id);
        id
    }

    fn get(&self, label: &str) -> Option<u32> {
        self.ids.get(label).copied()
    }

    fn label(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && !label.contains(['\t', '\n', '\r'])
}

/// How mediator (CVT) nodes are recognised in the raw input.
#[derive(Clone, Debug)]
pub enum CvtSpec {
    /// An explicit set of mediator labels.
    Labels(HashSet<String>),
    /// Every entity whose label starts with the prefix.
    Prefix(String),
}

impl CvtSpec {
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CvtSpec::Labels(labels.into_iter().map(Into::into).collect())
    }

    pub fn is_cvt(&self, label: &str) -> bool {
        match self {
            CvtSpec::Labels(set) => set.contains(label),
            CvtSpec::Prefix(prefix) => label.starts_with(prefix.as_str()),
        }
    }
}

/// Delimiter between the two relation labels of a collapsed mediator edge.
pub const CVT_JOIN: &str = "-";

/// Replaces every mediator node by direct edges.
///
/// Each pair `(a, r1, cvt)`, `(cvt, r2, b)` becomes `(a, "r1-r2", b)`. Triples
/// that touch no mediator pass through in input order. Mediators lacking an
/// incoming or outgoing edge, and edges between two mediators, are dropped
/// with a warning.
pub fn collapse_cvt(raw: &[LabelTriple], cvt: &CvtSpec) -> Vec<LabelTriple> {
    let mut incoming: HashMap<&str, usize> = HashMap::new();
    let mut outgoing: HashMap<&str, Vec<(&str, &str)>> = HashMap::new();
    let mut mediators: Vec<&str> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();

    for t in raw {
        let head_cvt = cvt.is_cvt(&t.head);
        let tail_cvt = cvt.is_cvt(&t.tail);
        for (label, is) in [(t.head.as_str(), head_cvt), (t.tail.as_str(), tail_cvt)] {
            if is && seen.insert(label) {
                mediators.push(label);
            }
        }
        match (head_cvt, tail_cvt) {
            (true, true) => log::warn!("dropping edge between mediator nodes: {t}"),
            (false, true) => *incoming.entry(t.tail.as_str()).or_default() += 1,
            (true, false) => outgoing
                .entry(t.head.as_str())
                .or_default()
                .push((t.relation.as_str(), t.tail.as_str())),
            (false, false) => {}
        }
    }

    for m in &mediators {
        if !incoming.contains_key(m) {
            log::warn!("mediator node {m:?} has no incoming edge; dropped");
        }
        if !outgoing.contains_key(m) {
            log::warn!("mediator node {m:?} has no outgoing edge; dropped");
        }
    }

    let mut out = Vec::with_capacity(raw.len());
    for t in raw {
        match (cvt.is_cvt(&t.head), cvt.is_cvt(&t.tail)) {
            (false, false) => out.push(t.clone()),
            (false, true) => {
                for (r2, b) in outgoing.get(t.tail.as_str()).into_iter().flatten() {
                    out.push(LabelTriple::new(
                        t.head.clone(),
                        format!("{}{CVT_JOIN}{r2}", t.relation),
                        *b,
                    ));
                }
            }
            _ => {}
        }
    }
    out
}

/// Parses the triple file format: one `head\trelation\ttail` per line,
/// `#` comment lines and blank lines ignored.
pub fn parse_triples<R: BufRead>(mut reader: R) -> Result<Vec<LabelTriple>, LoadError> {
    let mut out = Vec::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let line = std::str::from_utf8(&buf).map_err(|_| LoadError::InvalidUtf8 { line: line_no })?;
        let line = line.strip_suffix('\n').unwrap_or(line);
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(LoadError::FieldCount {
                line: line_no,
                found: fields.len(),
            });
        }
        for (field, name) in fields.iter().zip(["head", "relation", "tail"]) {
            if field.is_empty() {
                return Err(LoadError::EmptyField {
                    line: line_no,
                    field: name,
                });
            }
        }
        out.push(LabelTriple::new(fields[0], fields[1], fields[2]));
    }
    Ok(out)
}

/// Loads a graph from a triple stream.
pub fn load_graph<R: BufRead>(reader: R) -> Result<KnowledgeGraph, LoadError> {
    KnowledgeGraph::from_label_triples(&parse_triples(reader)?)
}

/// Loads a graph, collapsing mediator nodes first.
pub fn load_graph_with_cvt<R: BufRead>(reader: R, cvt: &CvtSpec) -> Result<KnowledgeGraph, LoadError> {
    KnowledgeGraph::from_label_triples(&collapse_cvt(&parse_triples(reader)?, cvt))
}

/// Immutable, indexed triple set.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    /// Sorted, deduplicated.
    triples: Vec<Triple>,
    /// Per head: (relation, tail) pairs in ascending order.
    out_index: Vec<Vec<(RelationId, EntityId)>>,
    /// Per head: distinct outgoing relations in ascending order.
    rel_heads: Vec<Vec<RelationId>>,
    rel_index: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl KnowledgeGraph {
    /// Interns and indexes label triples. Ids follow first appearance
    /// (head before tail), so the same input always yields the same ids.
    pub fn from_label_triples(raw: &[LabelTriple]) -> Result<Self, LoadError> {
        let mut entities = Interner::default();
        let mut relations = Interner::default();
        let mut triples = Vec::with_capacity(raw.len());
        for t in raw {
            for label in [&t.head, &t.relation, &t.tail] {
                if !valid_label(label) {
                    return Err(LoadError::InvalidLabel {
                        label: label.clone(),
                    });
                }
            }
            let head = EntityId(entities.intern(&t.head));
            let relation = RelationId(relations.intern(&t.relation));
            let tail = EntityId(entities.intern(&t.tail));
            triples.push(Triple::new(head, relation, tail));
        }
        triples.sort_unstable();
        triples.dedup();

        let mut out_index = vec![Vec::new(); entities.len()];
        let mut rel_heads: Vec<Vec<RelationId>> = vec![Vec::new(); entities.len()];
        let mut rel_index: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        // Sorted triples make every index list come out ascending.
        for t in &triples {
            out_index[t.head.0 as usize].push((t.relation, t.tail));
            let rels = &mut rel_heads[t.head.0 as usize];
            if rels.last() != Some(&t.relation) {
                rels.push(t.relation);
            }
            rel_index.entry((t.head, t.relation)).or_default().push(t.tail);
        }

        Ok(Self {
            entities,
            relations,
            triples,
            out_index,
            rel_heads,
            rel_index,
        })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// All triples in ascending order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entities.get(label).map(EntityId)
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relations.get(label).map(RelationId)
    }

    pub fn entity_label(&self, id: EntityId) -> Option<&str> {
        self.entities.label(id.0)
    }

    pub fn relation_label(&self, id: RelationId) -> Option<&str> {
        self.relations.label(id.0)
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.relations.len() as u32).map(RelationId)
    }

    /// Tails `t` with `(head, relation, t)` in the graph, ascending.
    pub fn objects_of(&self, head: EntityId, relation: RelationId) -> &[EntityId] {
        self.rel_index
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Distinct relations leaving `head`, ascending.
    pub fn relations_from(&self, head: EntityId) -> &[RelationId] {
        self.rel_heads
            .get(head.0 as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Every `(relation, tail)` leaving `head`, ascending.
    pub fn out_edges(&self, head: EntityId) -> &[(RelationId, EntityId)] {
        self.out_index
            .get(head.0 as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn has_triple(&self, t: Triple) -> bool {
        self.objects_of(t.head, t.relation).binary_search(&t.tail).is_ok()
    }

    pub fn has_outgoing(&self, head: EntityId) -> bool {
        !self.out_edges(head).is_empty()
    }

    /// Spells a triple with its labels. `None` if any id is foreign.
    pub fn label_triple(&self, t: Triple) -> Option<LabelTriple> {
        Some(LabelTriple::new(
            self.entity_label(t.head)?,
            self.relation_label(t.relation)?,
            self.entity_label(t.tail)?,
        ))
    }

    /// Resolves a label triple to ids, if it is a member of the graph.
    pub fn resolve_triple(&self, t: &LabelTriple) -> Option<Triple> {
        let triple = Triple::new(
            self.entity_id(&t.head)?,
            self.relation_id(&t.relation)?,
            self.entity_id(&t.tail)?,
        );
        self.has_triple(triple).then_some(triple)
    }
}
