//! Knowledge path expansion: turn one concrete path into a template whose
//! final tail is a variable, then retrieve every instance of it.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};

/// A path whose last tail is the variable `?x`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PathTemplate {
    /// Concrete triples before the final hop.
    pub prefix: Vec<Triple>,
    pub final_head: EntityId,
    pub final_relation: RelationId,
}

impl PathTemplate {
    pub fn len(&self) -> usize {
        self.prefix.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Human-readable form, e.g. `(US, borders, ?x)`.
    pub fn display<'a>(&'a self, g: &'a KnowledgeGraph) -> impl fmt::Display + 'a {
        TemplateDisplay { t: self, g }
    }
}

struct TemplateDisplay<'a> {
    t: &'a PathTemplate,
    g: &'a KnowledgeGraph,
}

impl fmt::Display for TemplateDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = |id| self.g.entity_label(id).unwrap_or("?");
        let r = |id| self.g.relation_label(id).unwrap_or("?");
        for t in &self.t.prefix {
            write!(f, "({}, {}, {}) ", e(t.head), r(t.relation), e(t.tail))?;
        }
        write!(f, "({}, {}, ?x)", e(self.t.final_head), r(self.t.final_relation))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExpansionError {
    #[error("cannot abstract an empty path")]
    EmptyPath,
    #[error("path is disconnected at triple {index}")]
    Disconnected { index: usize },
    #[error("template prefix triple {index} is not in the graph")]
    InvalidTemplate { index: usize },
}

fn check_connected(path: &[Triple]) -> Result<(), ExpansionError> {
    match path.windows(2).position(|w| w[1].head != w[0].tail) {
        Some(i) => Err(ExpansionError::Disconnected { index: i + 1 }),
        None => Ok(()),
    }
}

/// Replaces the final tail of `path` by the template variable.
pub fn abstract_terminal(path: &[Triple]) -> Result<PathTemplate, ExpansionError> {
    let (last, prefix) = path.split_last().ok_or(ExpansionError::EmptyPath)?;
    check_connected(path)?;
    Ok(PathTemplate {
        prefix: prefix.to_vec(),
        final_head: last.head,
        final_relation: last.relation,
    })
}

/// All paths in `g` matching the template, in ascending order of the
/// substituted tail.
pub fn instantiate(t: &PathTemplate, g: &KnowledgeGraph) -> Result<Vec<Vec<Triple>>, ExpansionError> {
    for (index, triple) in t.prefix.iter().enumerate() {
        if !g.has_triple(*triple) {
            return Err(ExpansionError::InvalidTemplate { index });
        }
    }
    check_connected(&t.prefix)?;
    if let Some(last) = t.prefix.last() {
        if last.tail != t.final_head {
            return Err(ExpansionError::Disconnected { index: t.prefix.len() });
        }
    }
    Ok(g.objects_of(t.final_head, t.final_relation)
        .iter()
        .map(|&tail| {
            let mut p = t.prefix.clone();
            p.push(Triple::new(t.final_head, t.final_relation, tail));
            p
        })
        .collect())
}

/// Union of the expanded final tails over all paths.
pub fn expand_answers(paths: &[Vec<Triple>], g: &KnowledgeGraph) -> Result<BTreeSet<EntityId>, ExpansionError> {
    let mut out = BTreeSet::new();
    for p in paths {
        let template = abstract_terminal(p)?;
        for instance in instantiate(&template, g)? {
            out.insert(instance.last().expect("instances are non-empty").tail);
        }
    }
    Ok(out)
}
