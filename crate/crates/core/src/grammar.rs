//! Surface formats for reasoning chains and knowledge paths.
//!
//! ```text
//! <THINK>step one step two</THINK>
//! <ALIGN><TRIPLE> <|> US <|> borders <|> Mexico </TRIPLE></ALIGN>
//! ```
//!
//! The compact `<TRI>(h,r,t)</TRI>` triple form is accepted when parsing
//! but never emitted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, LabelTriple};

pub const THINK_OPEN: &str = "<THINK>";
pub const THINK_CLOSE: &str = "</THINK>";
pub const ALIGN_OPEN: &str = "<ALIGN>";
pub const ALIGN_CLOSE: &str = "</ALIGN>";
pub const TRIPLE_OPEN: &str = "<TRIPLE>";
pub const TRIPLE_CLOSE: &str = "</TRIPLE>";
pub const FIELD_SEP: &str = "<|>";
const TRI_OPEN: &str = "<TRI>";
const TRI_CLOSE: &str = "</TRI>";

/// Strings that may not appear inside a step or a label.
pub const RESERVED_MARKERS: [&str; 7] = [
    THINK_OPEN,
    THINK_CLOSE,
    ALIGN_OPEN,
    ALIGN_CLOSE,
    TRIPLE_OPEN,
    TRIPLE_CLOSE,
    FIELD_SEP,
];

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub steps: Vec<String>,
}

impl ReasoningChain {
    pub fn new<I, S>(steps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            steps: steps.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KnowledgePath {
    pub triples: Vec<LabelTriple>,
}

impl KnowledgePath {
    pub fn new(triples: Vec<LabelTriple>) -> Self {
        Self { triples }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Index of the first triple whose head differs from the previous tail.
    pub fn first_disconnect(&self) -> Option<usize> {
        self.triples
            .windows(2)
            .position(|w| w[1].head != w[0].tail)
            .map(|i| i + 1)
    }
}

/// The unified latent: a reasoning chain plus its aligned knowledge path.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GraphAwareChain {
    pub chain: ReasoningChain,
    pub path: KnowledgePath,
}

impl GraphAwareChain {
    pub fn new(chain: ReasoningChain, path: KnowledgePath) -> Self {
        Self { chain, path }
    }

    /// Chain followed by path, both in canonical form.
    pub fn serialize(&self) -> Result<String, GrammarError> {
        Ok(format!(
            "{}{}",
            serialize_chain(&self.chain)?,
            serialize_path(&self.path)?
        ))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GrammarError {
    #[error("reasoning chain has no steps")]
    EmptyChain,
    #[error("step {index} is empty")]
    EmptyStep { index: usize },
    #[error("step {index} contains reserved marker {marker}")]
    ReservedInStep { index: usize, marker: &'static str },
    #[error("knowledge path has no triples")]
    EmptyPath,
    #[error("triple {index}: invalid label {label:?}")]
    InvalidLabel { index: usize, label: String },
    #[error("knowledge path is disconnected at triple {index}")]
    Disconnected { index: usize },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("step lengths do not partition the chain text")]
    StepBoundaries,
    #[error("triples not in the graph: {}", list_triples(.0))]
    UnknownTriples(Vec<LabelTriple>),
}

fn list_triples(ts: &[LabelTriple]) -> String {
    ts.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn find_reserved(text: &str) -> Option<&'static str> {
    RESERVED_MARKERS.iter().copied().find(|m| text.contains(m))
}

/// Labels must also avoid the compatibility markers, which the path
/// parser treats as delimiters.
fn find_path_marker(label: &str) -> Option<&'static str> {
    PATH_MARKERS.iter().copied().find(|m| label.contains(m))
}

fn check_label(index: usize, label: &str) -> Result<(), GrammarError> {
    if label.is_empty() || label.trim() != label || find_path_marker(label).is_some() {
        return Err(GrammarError::InvalidLabel {
            index,
            label: label.to_owned(),
        });
    }
    Ok(())
}

/// `<THINK>` + steps joined by one space + `</THINK>`. Steps are trimmed.
pub fn serialize_chain(chain: &ReasoningChain) -> Result<String, GrammarError> {
    if chain.steps.is_empty() {
        return Err(GrammarError::EmptyChain);
    }
    let mut out = String::from(THINK_OPEN);
    for (index, step) in chain.steps.iter().enumerate() {
        let step = step.trim();
        if step.is_empty() {
            return Err(GrammarError::EmptyStep { index });
        }
        if let Some(marker) = find_reserved(step) {
            return Err(GrammarError::ReservedInStep { index, marker });
        }
        if index > 0 {
            out.push(' ');
        }
        out.push_str(step);
    }
    out.push_str(THINK_CLOSE);
    Ok(out)
}

fn parse_chain_inner(s: &str) -> Result<&str, GrammarError> {
    let mut sc = Scanner::new(s);
    sc.skip_ws();
    sc.expect(THINK_OPEN)?;
    let start = sc.pos;
    let (marker, at) = sc
        .next_marker(&RESERVED_MARKERS)
        .ok_or_else(|| sc.error_at(s.len(), "unterminated reasoning chain"))?;
    if marker != THINK_CLOSE {
        return Err(sc.error_at(at, format!("unexpected {marker} inside reasoning chain")));
    }
    let inner = s[start..at].trim();
    sc.pos = at + THINK_CLOSE.len();
    sc.expect_end()?;
    if inner.is_empty() {
        return Err(GrammarError::EmptyChain);
    }
    Ok(inner)
}

/// Parses a reasoning chain. Free text carries no step delimiter, so the
/// whole body becomes a single step.
pub fn parse_chain(s: &str) -> Result<ReasoningChain, GrammarError> {
    Ok(ReasoningChain::new([parse_chain_inner(s)?]))
}

/// Parses a chain whose step byte lengths were recorded out of band.
pub fn parse_chain_with_steps(s: &str, step_lens: &[usize]) -> Result<ReasoningChain, GrammarError> {
    let inner = parse_chain_inner(s)?;
    let mut steps = Vec::with_capacity(step_lens.len());
    let mut rest = inner;
    for (i, &len) in step_lens.iter().enumerate() {
        if i > 0 {
            rest = rest.strip_prefix(' ').ok_or(GrammarError::StepBoundaries)?;
        }
        if len == 0 || len > rest.len() || !rest.is_char_boundary(len) {
            return Err(GrammarError::StepBoundaries);
        }
        let (step, tail) = rest.split_at(len);
        steps.push(step.to_owned());
        rest = tail;
    }
    if !rest.is_empty() || steps.is_empty() {
        return Err(GrammarError::StepBoundaries);
    }
    Ok(ReasoningChain { steps })
}

/// Byte length of each step as [`serialize_chain`] writes it.
pub fn step_lengths(chain: &ReasoningChain) -> Vec<usize> {
    chain.steps.iter().map(|s| s.trim().len()).collect()
}

/// Canonical delimiter form of a single triple.
pub fn serialize_triple(t: &LabelTriple) -> String {
    format!(
        "{TRIPLE_OPEN} {FIELD_SEP} {} {FIELD_SEP} {} {FIELD_SEP} {} {TRIPLE_CLOSE}",
        t.head, t.relation, t.tail
    )
}

pub fn serialize_path(path: &KnowledgePath) -> Result<String, GrammarError> {
    if path.is_empty() {
        return Err(GrammarError::EmptyPath);
    }
    for (index, t) in path.triples.iter().enumerate() {
        for label in [&t.head, &t.relation, &t.tail] {
            check_label(index, label)?;
        }
    }
    if let Some(index) = path.first_disconnect() {
        return Err(GrammarError::Disconnected { index });
    }
    let mut out = String::from(ALIGN_OPEN);
    for t in &path.triples {
        out.push_str(&serialize_triple(t));
    }
    out.push_str(ALIGN_CLOSE);
    Ok(out)
}

/// Parses a knowledge path. With a graph, every triple must also be a
/// member of it.
pub fn parse_path(s: &str, graph: Option<&KnowledgeGraph>) -> Result<KnowledgePath, GrammarError> {
    let path = parse_path_unchecked(s)?;
    if let Some(index) = path.first_disconnect() {
        return Err(GrammarError::Disconnected { index });
    }
    if let Some(g) = graph {
        let unknown: Vec<LabelTriple> = path
            .triples
            .iter()
            .filter(|t| g.resolve_triple(t).is_none())
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(GrammarError::UnknownTriples(unknown));
        }
    }
    Ok(path)
}

const PATH_MARKERS: [&str; 9] = [
    THINK_OPEN,
    THINK_CLOSE,
    ALIGN_OPEN,
    ALIGN_CLOSE,
    TRIPLE_OPEN,
    TRIPLE_CLOSE,
    FIELD_SEP,
    TRI_OPEN,
    TRI_CLOSE,
];

fn parse_path_unchecked(s: &str) -> Result<KnowledgePath, GrammarError> {
    let mut sc = Scanner::new(s);
    sc.skip_ws();
    sc.expect(ALIGN_OPEN)?;
    let mut triples = Vec::new();
    loop {
        sc.skip_ws();
        if sc.eat(ALIGN_CLOSE) {
            break;
        } else if sc.eat(TRIPLE_OPEN) {
            sc.skip_ws();
            sc.expect(FIELD_SEP)?;
            let head = sc.field_until(FIELD_SEP)?;
            let relation = sc.field_until(FIELD_SEP)?;
            let tail = sc.field_until(TRIPLE_CLOSE)?;
            triples.push(LabelTriple::new(head, relation, tail));
        } else if sc.eat(TRI_OPEN) {
            let open = sc.pos;
            let (marker, at) = sc
                .next_marker(&PATH_MARKERS)
                .ok_or_else(|| sc.error_at(s.len(), "unterminated <TRI>"))?;
            if marker != TRI_CLOSE {
                return Err(sc.error_at(at, format!("unexpected {marker} inside <TRI>")));
            }
            let body = s[open..at].trim();
            let inner = body
                .strip_prefix('(')
                .and_then(|b| b.strip_suffix(')'))
                .ok_or_else(|| sc.error_at(open, "expected (head,relation,tail)"))?;
            let (Some(first), Some(last)) = (inner.find(','), inner.rfind(',')) else {
                return Err(sc.error_at(open, "expected three comma-separated fields"));
            };
            if first == last {
                return Err(sc.error_at(open, "expected three comma-separated fields"));
            }
            let fields = [&inner[..first], &inner[first + 1..last], &inner[last + 1..]];
            let fields = fields.map(str::trim);
            if fields.iter().any(|f| f.is_empty()) {
                return Err(sc.error_at(open, "empty field in <TRI>"));
            }
            triples.push(LabelTriple::new(fields[0], fields[1], fields[2]));
            sc.pos = at + TRI_CLOSE.len();
        } else if sc.pos >= s.len() {
            return Err(sc.error_at(s.len(), "unterminated knowledge path"));
        } else {
            return Err(sc.error_at(sc.pos, "expected <TRIPLE> or </ALIGN>"));
        }
    }
    sc.expect_end()?;
    Ok(KnowledgePath { triples })
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), GrammarError> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.error_at(self.pos, format!("expected {lit}")))
        }
    }

    fn expect_end(&mut self) -> Result<(), GrammarError> {
        self.skip_ws();
        if self.pos == self.src.len() {
            Ok(())
        } else {
            Err(self.error_at(self.pos, "trailing content"))
        }
    }

    /// Earliest marker at or after the cursor. Longer markers win ties, so
    /// `<TRIPLE>` is never mistaken for `<TRI>`.
    fn next_marker(&self, markers: &[&'static str]) -> Option<(&'static str, usize)> {
        let rest = self.rest();
        markers
            .iter()
            .filter_map(|m| rest.find(m).map(|i| (*m, self.pos + i)))
            .min_by_key(|&(m, at)| (at, std::cmp::Reverse(m.len())))
    }

    /// Reads a trimmed, non-empty field terminated by `end`.
    fn field_until(&mut self, end: &'static str) -> Result<&'a str, GrammarError> {
        let start = self.pos;
        let (marker, at) = self
            .next_marker(&PATH_MARKERS)
            .ok_or_else(|| self.error_at(self.src.len(), format!("expected {end}")))?;
        if marker != end {
            return Err(self.error_at(at, format!("expected {end}, found {marker}")));
        }
        let field = self.src[start..at].trim();
        if field.is_empty() {
            return Err(self.error_at(start, "empty field"));
        }
        self.pos = at + end.len();
        Ok(field)
    }

    fn error_at(&self, offset: usize, message: impl Into<String>) -> GrammarError {
        GrammarError::Parse {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptyChain,
    EmptyStep { step: usize },
    MarkerInStep { step: usize, marker: &'static str },
    EmptyPath,
    InvalidLabel { index: usize },
    MarkerInLabel { index: usize, marker: &'static str },
    Disconnected { index: usize },
    PathLongerThanChain { path_len: usize, chain_len: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentReport {
    pub violations: Vec<Violation>,
}

impl AlignmentReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every structural problem of a graph-aware chain. Never fails.
pub fn validate_alignment(z: &GraphAwareChain) -> AlignmentReport {
    let mut violations = Vec::new();
    if z.chain.steps.is_empty() {
        violations.push(Violation::EmptyChain);
    }
    for (step, text) in z.chain.steps.iter().enumerate() {
        if text.trim().is_empty() {
            violations.push(Violation::EmptyStep { step });
        }
        if let Some(marker) = find_reserved(text) {
            violations.push(Violation::MarkerInStep { step, marker });
        }
    }
    if z.path.is_empty() {
        violations.push(Violation::EmptyPath);
    }
    for (index, t) in z.path.triples.iter().enumerate() {
        for label in [&t.head, &t.relation, &t.tail] {
            if let Some(marker) = find_path_marker(label) {
                violations.push(Violation::MarkerInLabel { index, marker });
            } else if label.is_empty() || label.trim() != label {
                violations.push(Violation::InvalidLabel { index });
            }
        }
    }
    for index in 1..z.path.len() {
        if z.path.triples[index].head != z.path.triples[index - 1].tail {
            violations.push(Violation::Disconnected { index });
        }
    }
    if z.path.len() > z.chain.steps.len() {
        violations.push(Violation::PathLongerThanChain {
            path_len: z.path.len(),
            chain_len: z.chain.steps.len(),
        });
    }
    AlignmentReport { violations }
}

/// Wire record for a candidate graph-aware chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub chain: Vec<String>,
    pub path: Vec<[String; 3]>,
    pub logp_gen: f64,
}

impl CandidateRecord {
    pub fn from_chain(z: &GraphAwareChain, logp_gen: f64) -> Self {
        Self {
            chain: z.chain.steps.clone(),
            path: z
                .path
                .triples
                .iter()
                .map(|t| [t.head.clone(), t.relation.clone(), t.tail.clone()])
                .collect(),
            logp_gen,
        }
    }

    pub fn to_chain(&self) -> GraphAwareChain {
        GraphAwareChain {
            chain: ReasoningChain::new(self.chain.iter().cloned()),
            path: KnowledgePath::new(
                self.path
                    .iter()
                    .map(|[h, r, t]| LabelTriple::new(h.clone(), r.clone(), t.clone()))
                    .collect(),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::load_graph;

    fn lt(h: &str, r: &str, t: &str) -> LabelTriple {
        LabelTriple::new(h, r, t)
    }

    #[test]
    fn chain_golden() {
        let c = ReasoningChain::new(["Find the profession of Josef Mengele."]);
        assert_eq!(
            serialize_chain(&c).unwrap(),
            "<THINK>Find the profession of Josef Mengele.</THINK>"
        );
        assert_eq!(serialize_chain(&ReasoningChain::default()), Err(GrammarError::EmptyChain));
    }

    #[test]
    fn chain_errors() {
        let c = ReasoningChain::new(["ok", "bad <ALIGN> step"]);
        assert!(matches!(
            serialize_chain(&c),
            Err(GrammarError::ReservedInStep { index: 1, .. })
        ));
        assert_eq!(
            serialize_chain(&ReasoningChain::new(["a", "  "])),
            Err(GrammarError::EmptyStep { index: 1 })
        );
    }

    #[test]
    fn chain_parse_errors_carry_offsets() {
        let err = parse_chain("<THINK>a <THINK>b</THINK>").unwrap_err();
        assert!(matches!(err, GrammarError::Parse { offset: 9, .. }), "{err}");
        let err = parse_chain("<THINK>abc").unwrap_err();
        assert!(matches!(err, GrammarError::Parse { offset: 10, .. }));
        let err = parse_chain("x<THINK>a</THINK>").unwrap_err();
        assert!(matches!(err, GrammarError::Parse { offset: 0, .. }));
        let err = parse_chain("<THINK>a</THINK> tail").unwrap_err();
        assert!(matches!(err, GrammarError::Parse { offset: 17, .. }));
        assert_eq!(parse_chain("<THINK>  </THINK>"), Err(GrammarError::EmptyChain));
    }

    #[test]
    fn free_text_chain_is_one_step() {
        let c = parse_chain("  <THINK> Step one. Step two. </THINK>\n").unwrap();
        assert_eq!(c.steps, ["Step one. Step two."]);
    }

    #[test]
    fn chain_with_recorded_steps() {
        let c = ReasoningChain::new(["Find  the capital.", "Then its mayor."]);
        let s = serialize_chain(&c).unwrap();
        assert_eq!(parse_chain_with_steps(&s, &step_lengths(&c)).unwrap(), c);
        assert_eq!(parse_chain_with_steps(&s, &[3, 5]), Err(GrammarError::StepBoundaries));
    }

    #[test]
    fn path_golden() {
        let p = KnowledgePath::new(vec![lt("US", "borders", "Mexico")]);
        assert_eq!(
            serialize_path(&p).unwrap(),
            "<ALIGN><TRIPLE> <|> US <|> borders <|> Mexico </TRIPLE></ALIGN>"
        );
    }

    #[test]
    fn disconnected_path_is_rejected() {
        let p = KnowledgePath::new(vec![lt("A", "r", "B"), lt("C", "r", "D")]);
        assert_eq!(serialize_path(&p), Err(GrammarError::Disconnected { index: 1 }));
        let s = "<ALIGN><TRIPLE> <|> A <|> r <|> B </TRIPLE><TRIPLE> <|> C <|> r <|> D </TRIPLE></ALIGN>";
        assert_eq!(parse_path(s, None), Err(GrammarError::Disconnected { index: 1 }));
    }

    #[test]
    fn ragged_whitespace_and_compat_form() {
        let s = " <ALIGN>\n <TRIPLE><|>US<|>   borders <|>Mexico</TRIPLE> <TRI>( Mexico , borders , Guatemala )</TRI></ALIGN> ";
        let p = parse_path(s, None).unwrap();
        assert_eq!(
            p.triples,
            vec![lt("US", "borders", "Mexico"), lt("Mexico", "borders", "Guatemala")]
        );
        let p = parse_path("<ALIGN><TRI>(US,borders,Mexico)</TRI></ALIGN>", None).unwrap();
        assert_eq!(p.triples, vec![lt("US", "borders", "Mexico")]);
    }

    #[test]
    fn path_parse_rejections() {
        for bad in [
            "",
            "<ALIGN>",
            "<ALIGN><TRIPLE> <|> a <|> r </TRIPLE></ALIGN>",
            "<ALIGN><TRIPLE> <|> a <|> r <|> b </TRIPLE>",
            "<ALIGN></TRIPLE></ALIGN>",
            "<ALIGN><TRIPLE> <|> a <|> <|> b </TRIPLE></ALIGN>",
            "<ALIGN><TRI>(a,b)</TRI></ALIGN>",
            "<ALIGN><TRIPLE> <|> a <|> r <|> b </TRIPLE></ALIGN></ALIGN>",
            "<ALIGN><TRIPLE> <|> a <ALIGN> <|> r <|> b </TRIPLE></ALIGN>",
        ] {
            assert!(
                matches!(parse_path(bad, None), Err(GrammarError::Parse { .. })),
                "accepted {bad:?}"
            );
        }
    }

    #[test]
    fn graph_verification() {
        let g = load_graph("US\tborders\tMexico\nUS\tborders\tCanada\n".as_bytes()).unwrap();
        let ok = "<ALIGN><TRIPLE> <|> US <|> borders <|> Canada </TRIPLE></ALIGN>";
        assert!(parse_path(ok, Some(&g)).is_ok());
        let bad = "<ALIGN><TRIPLE> <|> US <|> borders <|> Peru </TRIPLE></ALIGN>";
        assert_eq!(
            parse_path(bad, Some(&g)),
            Err(GrammarError::UnknownTriples(vec![lt("US", "borders", "Peru")]))
        );
    }

    #[test]
    fn alignment_reports() {
        let one = GraphAwareChain::new(
            ReasoningChain::new(["Find the neighbours of US."]),
            KnowledgePath::new(vec![lt("US", "borders", "Mexico")]),
        );
        assert!(validate_alignment(&one).is_empty());
        let long = GraphAwareChain::new(
            ReasoningChain::new(["one step"]),
            KnowledgePath::new(vec![lt("A", "r", "B"), lt("B", "r", "C")]),
        );
        assert_eq!(
            validate_alignment(&long).violations,
            vec![Violation::PathLongerThanChain {
                path_len: 2,
                chain_len: 1
            }]
        );
        let leaky = GraphAwareChain::new(
            ReasoningChain::new(["see </THINK>"]),
            KnowledgePath::new(vec![lt("A", "r<|>", "B")]),
        );
        let v = validate_alignment(&leaky).violations;
        assert!(v.contains(&Violation::MarkerInStep {
            step: 0,
            marker: THINK_CLOSE
        }));
        assert!(v.contains(&Violation::MarkerInLabel {
            index: 0,
            marker: FIELD_SEP
        }));
    }

    #[test]
    fn candidate_record_json() {
        let json = r#"{"chain":["Find the borders of US."],"path":[["US","borders","Mexico"]],"logp_gen":-0.5}"#;
        let rec: CandidateRecord = serde_json::from_str(json).unwrap();
        let z = rec.to_chain();
        assert_eq!(z.path.triples, vec![lt("US", "borders", "Mexico")]);
        assert_eq!(serde_json::to_string(&CandidateRecord::from_chain(&z, -0.5)).unwrap(), json);
    }
}
