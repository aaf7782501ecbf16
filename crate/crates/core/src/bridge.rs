//! Client side of the line-delimited JSON protocol spoken with an external
//! model process over its standard streams.
//!
//! Every request carries an integer `id` that the reply echoes. A failed
//! request is answered with `{"id", "error"}`. The bridge is untrusted:
//! generated candidates go through the same verification as any other
//! proposal before they are used.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::decoder::{Scorer, ScorerError, Symbol, Vocabulary};
use crate::em::{
    answer_labels, emit_realigner_dataset, AnswerScorer, Candidate, EmError, Generator,
    Proposal, QAInstance, Selection, TrainingExample,
};
use crate::expansion::expand_answers;
use crate::grammar::CandidateRecord;
use crate::kg::KnowledgeGraph;

pub const PROTOCOL: &str = "rar-bridge/1";
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(600);
/// Environment fallback for the bridge command line.
pub const BRIDGE_ENV: &str = "RAR_BRIDGE_CMD";

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("failed to start bridge: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("bridge i/o: {0}")]
    Io(String),
    #[error("bridge closed its output")]
    Closed,
    #[error("no reply to {op} within {secs} s")]
    Timeout { op: String, secs: u64 },
    #[error("malformed reply: {0}")]
    Protocol(String),
    #[error("bridge speaks {found:?}, expected {PROTOCOL:?}")]
    Version { found: String },
    #[error("bridge does not support {0}")]
    Unsupported(&'static str),
    #[error("bridge error on request {id}: {message}")]
    Remote { id: u64, message: String },
}

impl From<BridgeError> for EmError {
    fn from(e: BridgeError) -> Self {
        EmError::Backend(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    #[default]
    Serial,
    Concurrent,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Caps {
    pub generate: bool,
    pub score_continuations: bool,
    pub score_answer: bool,
    pub consolidate: bool,
    pub finetune: bool,
    pub concurrency: Concurrency,
}

/// One JSON object per line in each direction.
pub trait Transport: Send {
    fn send(&mut self, line: &str) -> Result<(), BridgeError>;
    fn recv(&mut self, timeout: Duration) -> Result<String, BridgeError>;
}

/// A child process; its stdout is drained by a reader thread.
pub struct ChildTransport {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl ChildTransport {
    /// Runs `cmd` through the shell.
    pub fn spawn(cmd: &str) -> Result<Self, BridgeError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(BridgeError::Spawn)?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { child, stdin, lines })
    }
}

impl Transport for ChildTransport {
    fn send(&mut self, line: &str) -> Result<(), BridgeError> {
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| BridgeError::Io(e.to_string()))
    }

    fn recv(&mut self, timeout: Duration) -> Result<String, BridgeError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(BridgeError::Io(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(BridgeError::Timeout {
                op: "request".into(),
                secs: timeout.as_secs(),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(BridgeError::Closed),
        }
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct Channel {
    transport: Box<dyn Transport>,
    /// Replies that arrived while waiting for another id.
    early: HashMap<u64, Value>,
}

/// A negotiated connection.
pub struct BridgeSession {
    channel: Mutex<Channel>,
    caps: Caps,
    next_id: AtomicU64,
    timeout: Duration,
}

impl std::fmt::Debug for BridgeSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeSession").field("caps", &self.caps).finish()
    }
}

impl BridgeSession {
    /// Spawns `cmd` and performs the handshake.
    pub fn spawn(cmd: &str) -> Result<Self, BridgeError> {
        Self::connect(Box::new(ChildTransport::spawn(cmd)?))
    }

    /// Handshakes over `transport`. On failure the transport is dropped,
    /// which terminates a child process.
    pub fn connect(transport: Box<dyn Transport>) -> Result<Self, BridgeError> {
        let mut session = Self {
            channel: Mutex::new(Channel {
                transport,
                early: HashMap::new(),
            }),
            caps: Caps::default(),
            next_id: AtomicU64::new(1),
            timeout: HANDSHAKE_TIMEOUT,
        };
        let reply = session.call("hello", Map::new())?;
        match reply.get("protocol").and_then(Value::as_str) {
            Some(PROTOCOL) => {}
            Some(other) => return Err(BridgeError::Version { found: other.into() }),
            None => return Err(BridgeError::Protocol("handshake reply lacks protocol".into())),
        }
        session.caps = serde_json::from_value(reply.get("caps").cloned().unwrap_or(Value::Null))
            .map_err(|e| BridgeError::Protocol(format!("caps: {e}")))?;
        session.timeout = REQUEST_TIMEOUT;
        Ok(session)
    }

    pub fn caps(&self) -> &Caps {
        &self.caps
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn request_line(&self, op: &str, mut body: Map<String, Value>) -> (u64, String) {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        body.insert("id".into(), json!(id));
        body.insert("op".into(), json!(op));
        (id, Value::Object(body).to_string())
    }

    fn await_reply(&self, ch: &mut Channel, id: u64, op: &str) -> Result<Value, BridgeError> {
        loop {
            if let Some(v) = ch.early.remove(&id) {
                return unwrap_reply(id, v);
            }
            let line = ch.transport.recv(self.timeout).map_err(|e| match e {
                BridgeError::Timeout { secs, .. } => BridgeError::Timeout { op: op.into(), secs },
                other => other,
            })?;
            let v: Value = serde_json::from_str(&line).map_err(|e| BridgeError::Protocol(format!("{e}: {line}")))?;
            let got = v
                .get("id")
                .and_then(Value::as_u64)
                .ok_or_else(|| BridgeError::Protocol(format!("reply without id: {line}")))?;
            if got == id {
                return unwrap_reply(id, v);
            }
            ch.early.insert(got, v);
        }
    }

    /// One request and its reply.
    pub fn call(&self, op: &str, body: Map<String, Value>) -> Result<Value, BridgeError> {
        let (id, line) = self.request_line(op, body);
        let mut ch = self.channel.lock().expect("bridge channel poisoned");
        ch.transport.send(&line)?;
        self.await_reply(&mut ch, id, op)
    }

    /// Several requests of one op. A concurrent bridge receives them all
    /// before answering and may reply in any order; a serial one gets them
    /// one at a time. Results follow the input order.
    pub fn call_batch(&self, op: &str, bodies: Vec<Map<String, Value>>) -> Vec<Result<Value, BridgeError>> {
        if self.caps.concurrency == Concurrency::Serial {
            return bodies.into_iter().map(|b| self.call(op, b)).collect();
        }
        let mut ch = self.channel.lock().expect("bridge channel poisoned");
        let mut ids = Vec::with_capacity(bodies.len());
        for body in bodies {
            let (id, line) = self.request_line(op, body);
            match ch.transport.send(&line) {
                Ok(()) => ids.push(Ok(id)),
                Err(e) => ids.push(Err(e)),
            }
        }
        ids.into_iter()
            .map(|id| id.and_then(|id| self.await_reply(&mut ch, id, op)))
            .collect()
    }

    fn require(&self, cap: bool, name: &'static str) -> Result<(), BridgeError> {
        if cap {
            Ok(())
        } else {
            Err(BridgeError::Unsupported(name))
        }
    }

    pub fn generate(
        &self,
        question: &str,
        topic_entities: &[&str],
        max_hops: usize,
        n: usize,
        seed: u64,
    ) -> Result<Vec<CandidateRecord>, BridgeError> {
        self.require(self.caps.generate, "generate")?;
        let reply = self.call(
            "generate",
            obj(json!({
                "question": question,
                "topic_entities": topic_entities,
                "constraints": {"max_hops": max_hops},
                "n": n,
                "seed": seed,
            })),
        )?;
        field(&reply, "candidates")
    }

    /// Log-probabilities keyed by symbol surface text. Symbols the bridge
    /// leaves out are ruled out.
    pub fn score_continuations(&self, prefix: &[&str], allowed: &[&str]) -> Result<HashMap<String, f64>, BridgeError> {
        self.require(self.caps.score_continuations, "score_continuations")?;
        let reply = self.call("score_continuations", obj(json!({"prefix": prefix, "allowed": allowed})))?;
        field(&reply, "logps")
    }

    pub fn score_answer(
        &self,
        question: &str,
        chain: &[String],
        path: &[[String; 3]],
        answers: &[String],
    ) -> Result<f64, BridgeError> {
        self.require(self.caps.score_answer, "score_answer")?;
        let reply = self.call(
            "score_answer",
            obj(json!({"question": question, "chain": chain, "path": path, "answers": answers})),
        )?;
        field(&reply, "logp")
    }

    pub fn consolidate(&self, prompt: &str) -> Result<String, BridgeError> {
        self.require(self.caps.consolidate, "consolidate")?;
        let reply = self.call("consolidate", obj(json!({"prompt": prompt})))?;
        field(&reply, "text")
    }

    pub fn finetune(&self, dataset_path: &str) -> Result<(), BridgeError> {
        self.require(self.caps.finetune, "finetune")?;
        self.call("finetune", obj(json!({"dataset_path": dataset_path})))?;
        Ok(())
    }
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("request bodies are objects"),
    }
}

fn unwrap_reply(id: u64, v: Value) -> Result<Value, BridgeError> {
    match v.get("error") {
        Some(e) => Err(BridgeError::Remote {
            id,
            message: e.as_str().map_or_else(|| e.to_string(), str::to_owned),
        }),
        None => Ok(v),
    }
}

fn field<T: serde::de::DeserializeOwned>(reply: &Value, name: &str) -> Result<T, BridgeError> {
    let v = reply
        .get(name)
        .ok_or_else(|| BridgeError::Protocol(format!("reply lacks {name:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| BridgeError::Protocol(format!("{name}: {e}")))
}

/// Continuation scores from the bridge.
pub struct BridgeScorer<'a> {
    session: &'a BridgeSession,
    g: &'a KnowledgeGraph,
    vocab: Vocabulary,
}

impl<'a> BridgeScorer<'a> {
    pub fn new(session: &'a BridgeSession, g: &'a KnowledgeGraph) -> Self {
        Self {
            session,
            g,
            vocab: Vocabulary::for_graph(g),
        }
    }

    fn surfaces(&self, symbols: &[Symbol]) -> Result<Vec<&'a str>, ScorerError> {
        symbols
            .iter()
            .map(|&s| {
                self.vocab
                    .surface(self.g, s)
                    .ok_or_else(|| ScorerError(format!("symbol {s:?} not in graph")))
            })
            .collect()
    }
}

impl Scorer for BridgeScorer<'_> {
    fn score_continuations(&self, prefix: &[Symbol], allowed: &[Symbol]) -> Result<Vec<f64>, ScorerError> {
        let allowed_text = self.surfaces(allowed)?;
        let mut logps = self
            .session
            .score_continuations(&self.surfaces(prefix)?, &allowed_text)
            .map_err(|e| ScorerError(e.to_string()))?;
        let scores = allowed_text
            .iter()
            .map(|s| logps.remove(*s).unwrap_or(f64::NEG_INFINITY))
            .collect();
        if let Some(extra) = logps.keys().next() {
            return Err(ScorerError(format!("score for symbol outside the allowed set: {extra:?}")));
        }
        Ok(scores)
    }

    /// Requests share one channel; parallel callers would only queue.
    fn concurrent(&self) -> bool {
        false
    }
}

/// Writes `examples` as JSON lines under `dir`.
fn write_dataset(dir: &std::path::Path, name: &str, examples: &[TrainingExample]) -> Result<PathBuf, EmError> {
    let io = |e: std::io::Error| EmError::Backend(format!("writing {name}: {e}"));
    std::fs::create_dir_all(dir).map_err(io)?;
    let path = dir.join(name);
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(io)?;
    Ok(path)
}

/// A ReAligner behind the bridge. Updates write the selection as an
/// instruction-tuning file and ask the bridge to fine-tune on it.
pub struct BridgeGenerator {
    session: Arc<BridgeSession>,
    max_hops: usize,
    work_dir: PathBuf,
    updates: AtomicUsize,
}

impl BridgeGenerator {
    pub fn new(session: Arc<BridgeSession>, max_hops: usize, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            session,
            max_hops,
            work_dir: work_dir.into(),
            updates: AtomicUsize::new(0),
        }
    }
}

impl Generator for BridgeGenerator {
    fn propose(&self, inst: &QAInstance, g: &KnowledgeGraph, n: usize, seed: u64) -> Result<Vec<Proposal>, EmError> {
        let records = self
            .session
            .generate(&inst.question, &inst.topic_labels(g), self.max_hops, n, seed)?;
        Ok(records
            .iter()
            .map(|r| Proposal {
                z: r.to_chain(),
                logp_gen: r.logp_gen,
            })
            .collect())
    }

    fn update(&mut self, g: &KnowledgeGraph, selected: &[Selection<'_>]) -> Result<(), EmError> {
        let n = self.updates.fetch_add(1, Ordering::Relaxed);
        let examples = emit_realigner_dataset(selected, g)?;
        let path = write_dataset(&self.work_dir, &format!("realigner_{n:03}.jsonl"), &examples)?;
        if self.session.caps().finetune {
            self.session.finetune(&path.to_string_lossy())?;
        } else {
            log::warn!("bridge cannot fine-tune; generator left unchanged");
        }
        Ok(())
    }

    fn digest(&self) -> String {
        format!("bridge-{}", self.updates.load(Ordering::Relaxed))
    }
}

/// A Responser behind the bridge: answers come from path expansion and
/// their likelihood from the bridge.
pub struct BridgeAnswerScorer {
    session: Arc<BridgeSession>,
    pre_optimized: bool,
    work_dir: PathBuf,
    updates: usize,
}

impl BridgeAnswerScorer {
    pub fn new(session: Arc<BridgeSession>, pre_optimized: bool, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            session,
            pre_optimized,
            work_dir: work_dir.into(),
            updates: 0,
        }
    }
}

impl AnswerScorer for BridgeAnswerScorer {
    fn answer(&self, _inst: &QAInstance, g: &KnowledgeGraph, c: &Candidate) -> Result<Vec<String>, EmError> {
        let tails = expand_answers(std::slice::from_ref(&c.path), g)?;
        Ok(answer_labels(g, &tails))
    }

    fn logp_answer(&self, inst: &QAInstance, _g: &KnowledgeGraph, c: &Candidate) -> Result<f64, EmError> {
        let record = CandidateRecord::from_chain(&c.z, c.logp_gen);
        let lp = self
            .session
            .score_answer(&inst.question, &record.chain, &record.path, &inst.gold_answers)?;
        if lp.is_nan() || lp > 0.0 {
            return Err(EmError::Backend(format!("bridge returned log-probability {lp}")));
        }
        Ok(lp)
    }

    fn update(&mut self, dataset: &[TrainingExample]) -> Result<(), EmError> {
        let path = write_dataset(&self.work_dir, &format!("responser_{:03}.jsonl", self.updates), dataset)?;
        self.updates += 1;
        self.session.finetune(&path.to_string_lossy())?;
        Ok(())
    }

    fn pre_optimized(&self) -> bool {
        self.pre_optimized
    }
}
