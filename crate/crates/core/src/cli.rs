//! The `rar` command line.
//!
//! Every command writes JSON lines, the first of which names the schema
//! version. Exit status is 0 on success, 1 for usage errors and 2 for bad
//! input data.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bridge::{BridgeAnswerScorer, BridgeGenerator, BridgeScorer, BridgeSession, BRIDGE_ENV};
use crate::consolidation::{
    build_consolidation_prompt, consolidate_default, parse_consolidator_reply, ConsolidationInput, Hypothesis,
};
use crate::decoder::{decode_beam, Diagnostic, Scorer, UniformScorer};
use crate::em::{
    answer_labels, emit_realigner_dataset, emit_responser_dataset, run_em, AnswerScorer, EStepMode, EmConfig,
    EmState, Generator, MockAnswerScorer, MockGenerator, QAInstance, QaRecord, TrainingExample,
};
use crate::eval::{evaluate_dataset, AnswerSet};
use crate::expansion::{abstract_terminal, expand_answers, instantiate};
use crate::grammar::{serialize_path, validate_alignment, CandidateRecord, GraphAwareChain, KnowledgePath};
use crate::kg::{load_graph_with_cvt, CvtSpec, KnowledgeGraph, LabelTriple, Triple};
use crate::prompts;

pub const SCHEMA: &str = "rar/1";

#[derive(Debug, Parser)]
#[command(name = "rar", version, about = "Constrained reasoning-path QA over a knowledge graph")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a graph and report its size.
    LoadCheck(GraphArgs),
    /// Beam-decode knowledge paths from topic entities.
    Decode(DecodeArgs),
    /// Expand a path into all answers sharing its template.
    Expand(ExpandArgs),
    /// Run EM training.
    EmRun(EmRunArgs),
    /// Score predictions against gold answers.
    Eval(EvalArgs),
    /// Merge hypotheses into ranked answers.
    Consolidate(ConsolidateArgs),
    /// Write prompts for external model workflows.
    EmitPrompts(EmitArgs),
}

#[derive(Debug, Args)]
struct GraphArgs {
    /// Tab-separated triples file.
    #[arg(long)]
    kg: PathBuf,
    /// Entities with this label prefix are mediator nodes to collapse.
    #[arg(long)]
    cvt_prefix: Option<String>,
}

#[derive(Debug, Args)]
struct BridgeArgs {
    /// Command that starts a bridge process. Falls back to RAR_BRIDGE_CMD.
    #[arg(long)]
    bridge_cmd: Option<String>,
}

impl BridgeArgs {
    fn command(&self) -> Option<String> {
        self.bridge_cmd
            .clone()
            .or_else(|| std::env::var(BRIDGE_ENV).ok())
            .filter(|c| !c.trim().is_empty())
    }

    fn session(&self) -> Result<Option<BridgeSession>, CliError> {
        self.command()
            .map(|cmd| BridgeSession::spawn(&cmd).map_err(|e| CliError::Data(e.to_string())))
            .transpose()
    }
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Comma-separated topic entity labels.
    #[arg(long, value_delimiter = ',', required = true)]
    topic: Vec<String>,
    #[arg(long, default_value_t = 10)]
    beam_size: usize,
    #[arg(long, default_value_t = 3)]
    max_hops: usize,
    #[command(flatten)]
    bridge: BridgeArgs,
}

#[derive(Debug, Args)]
struct ExpandArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Path as a JSON array of [head, relation, tail] triples.
    #[arg(long)]
    path_json: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EStepArg {
    Rerank,
    Resample,
}

#[derive(Debug, Args)]
struct EmRunArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Training questions, JSON lines.
    #[arg(long)]
    dataset: PathBuf,
    /// Held-out questions; defaults to the training set.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "rar-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_samples: usize,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    beam_size: usize,
    #[arg(long, default_value_t = 3)]
    max_hops: usize,
    #[arg(long, default_value_t = 0.5)]
    p_stop: f64,
    /// Log-likelihood given to wrong answers.
    #[arg(long, default_value_t = 1e-6f64.ln(), allow_hyphen_values = true)]
    answer_floor: f64,
    #[arg(long, value_enum, default_value = "rerank")]
    estep: EStepArg,
    /// Train the Responser through the bridge instead of treating it as fixed.
    #[arg(long)]
    train_responser: bool,
    #[command(flatten)]
    bridge: BridgeArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions, JSON lines `{"id", "answers"}`.
    #[arg(long)]
    pred: PathBuf,
    /// Gold dataset, JSON lines.
    #[arg(long)]
    gold: PathBuf,
}

#[derive(Debug, Args)]
struct ConsolidateArgs {
    /// Hypotheses, JSON lines `{"id", "question", "hypotheses"}`.
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    bridge: BridgeArgs,
}

#[derive(Debug, Args)]
struct EmitArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Gold chains, JSON lines `{"id", "chain", "path", "logp_gen"}`.
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

fn data<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            let _ = writeln!(err, "error: --threads must be positive");
            return 1;
        }
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::LoadCheck(a) => load_check(a, out),
        Command::Decode(a) => decode(a, out),
        Command::Expand(a) => expand(a, out),
        Command::EmRun(a) => em_run(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Consolidate(a) => consolidate(a, out),
        Command::EmitPrompts(a) => emit_prompts(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let (CliError::Usage(m) | CliError::Data(m)) = &e;
            let _ = writeln!(err, "error: {m}");
            e.code()
        }
    }
}

fn emit(out: &mut dyn Write, v: &impl Serialize) -> Result<(), CliError> {
    let line = serde_json::to_string(v).expect("output serializes");
    writeln!(out, "{line}").map_err(data("writing output"))
}

fn schema(out: &mut dyn Write, command: &str) -> Result<(), CliError> {
    emit(out, &json!({"schema": SCHEMA, "command": command}))
}

fn jsonl_string<T: Serialize>(command: &str, records: &[T]) -> String {
    let mut s = json!({"schema": SCHEMA, "command": command}).to_string();
    s.push('\n');
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(data(path.display()))
}

fn load_kg(a: &GraphArgs) -> Result<KnowledgeGraph, CliError> {
    let file = File::open(&a.kg).map_err(data(a.kg.display()))?;
    let cvt = match &a.cvt_prefix {
        Some(p) => CvtSpec::Prefix(p.clone()),
        None => CvtSpec::from_labels(Vec::<String>::new()),
    };
    load_graph_with_cvt(BufReader::new(file), &cvt).map_err(data(a.kg.display()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(data(path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(data(path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(data(format!("{}:{}", path.display(), i + 1)))?;
        if v.get("schema").is_some() {
            continue;
        }
        out.push(serde_json::from_value(v).map_err(data(format!("{}:{}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn path_records(g: &KnowledgeGraph, path: &[Triple]) -> Vec<[String; 3]> {
    path.iter()
        .filter_map(|&t| g.label_triple(t))
        .map(|t| [t.head, t.relation, t.tail])
        .collect()
}

fn resolve_path(g: &KnowledgeGraph, triples: &[LabelTriple]) -> Result<Vec<Triple>, CliError> {
    triples
        .iter()
        .map(|t| {
            g.resolve_triple(t)
                .ok_or_else(|| CliError::Data(format!("triple {t} is not in the graph")))
        })
        .collect()
}

fn load_check(a: &GraphArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let g = load_kg(a)?;
    schema(out, "load-check")?;
    emit(
        out,
        &json!({"triples": g.len(), "entities": g.num_entities(), "relations": g.num_relations()}),
    )
}

fn decode(a: &DecodeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.beam_size == 0 || a.max_hops == 0 {
        return Err(CliError::Usage("--beam-size and --max-hops must be positive".into()));
    }
    let g = load_kg(&a.graph)?;
    let topic = a
        .topic
        .iter()
        .map(|l| {
            g.entity_id(l.trim())
                .ok_or_else(|| CliError::Data(format!("unknown topic entity {l:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let session = a.bridge.session()?;
    let bridged;
    let scorer: &dyn Scorer = match &session {
        Some(s) => {
            bridged = BridgeScorer::new(s, &g);
            &bridged
        }
        None => &UniformScorer,
    };
    let result = decode_beam(&g, scorer, &topic, a.beam_size, a.max_hops).map_err(data("decode"))?;
    schema(out, "decode")?;
    for (rank, s) in result.sequences.iter().enumerate() {
        let path = KnowledgePath::new(s.path().iter().filter_map(|&t| g.label_triple(t)).collect());
        emit(
            out,
            &json!({
                "rank": rank,
                "logp": s.logp,
                "path": path_records(&g, s.path()),
                "serialized": serialize_path(&path).map_err(data("serialize"))?,
            }),
        )?;
    }
    for d in &result.diagnostics {
        let v = match d {
            Diagnostic::NoPath => json!({"diagnostic": "no_path"}),
            Diagnostic::Cycle { sequence } => json!({"diagnostic": "cycle", "rank": sequence}),
        };
        emit(out, &v)?;
    }
    Ok(())
}

fn expand(a: &ExpandArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let g = load_kg(&a.graph)?;
    let raw: Vec<[String; 3]> = serde_json::from_str(&a.path_json).map_err(|e| CliError::Usage(format!("--path-json: {e}")))?;
    let labels: Vec<LabelTriple> = raw
        .into_iter()
        .map(|[h, r, t]| LabelTriple::new(h, r, t))
        .collect();
    let path = resolve_path(&g, &labels)?;
    let template = abstract_terminal(&path).map_err(data("expand"))?;
    let instances = instantiate(&template, &g).map_err(data("expand"))?;
    let answers = expand_answers(&[path], &g).map_err(data("expand"))?;
    schema(out, "expand")?;
    emit(
        out,
        &json!({
            "template": template.display(&g).to_string(),
            "answers": answer_labels(&g, &answers),
            "paths": instances.iter().map(|p| path_records(&g, p)).collect::<Vec<_>>(),
        }),
    )
}

fn link_all(records: &[QaRecord], g: &KnowledgeGraph) -> Result<Vec<QAInstance>, CliError> {
    records
        .iter()
        .map(|r| QAInstance::link(r, g).map_err(data("dataset")))
        .collect()
}

fn em_config(a: &EmRunArgs) -> Result<EmConfig, CliError> {
    let config = EmConfig {
        n_samples: a.n_samples,
        top_k: a.top_k,
        iterations: a.iterations,
        seed: a.seed,
        answer_floor_logp: a.answer_floor,
        beam_size: a.beam_size,
        max_hops: a.max_hops,
        p_stop: a.p_stop,
        estep: match a.estep {
            EStepArg::Rerank => EStepMode::Rerank,
            EStepArg::Resample => EStepMode::Resample,
        },
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

struct EmOutcome {
    reports: String,
    realigner: Vec<TrainingExample>,
    responser: Vec<TrainingExample>,
    summary: Value,
}

fn train<G: Generator, A: AnswerScorer>(
    mut state: EmState<G, A>,
    train: &[QAInstance],
    dev: &[QAInstance],
    g: &KnowledgeGraph,
    config: &EmConfig,
) -> Result<EmOutcome, CliError> {
    let reports = run_em(&mut state, train, dev, g, config).map_err(data("em-run"))?;
    let realigner = emit_realigner_dataset(&state.selected(train), g).map_err(data("em-run"))?;
    let responser = emit_responser_dataset(&state.samples(train), g).map_err(data("em-run"))?;
    let summary = json!({
        "iterations": reports.len(),
        "initial_hit": reports.first().map(|r| r.dev_before.macro_avg.hit),
        "final_hit": reports.last().map(|r| r.dev_after.macro_avg.hit),
        "final_f1": reports.last().map(|r| r.dev_after.macro_avg.f1),
    });
    Ok(EmOutcome {
        reports: jsonl_string("em-run", &reports),
        realigner,
        responser,
        summary,
    })
}

fn em_run(a: &EmRunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = em_config(a)?;
    let g = load_kg(&a.graph)?;
    let train_set = link_all(&read_jsonl::<QaRecord>(&a.dataset)?, &g)?;
    let dev_set = match &a.dev {
        Some(p) => link_all(&read_jsonl::<QaRecord>(p)?, &g)?,
        None => train_set.clone(),
    };
    std::fs::create_dir_all(&a.out).map_err(data(a.out.display()))?;
    let mock_answers = MockAnswerScorer::new(config.answer_floor_logp);
    let outcome = match a.bridge.session()? {
        None => {
            if a.train_responser {
                return Err(CliError::Usage("--train-responser needs a bridge".into()));
            }
            let state = EmState::new(MockGenerator::from_config(&g, &config), mock_answers);
            train(state, &train_set, &dev_set, &g, &config)?
        }
        Some(session) => {
            let session = Arc::new(session);
            let work = a.out.join("bridge");
            let generator = BridgeGenerator::new(Arc::clone(&session), config.max_hops, &work);
            if session.caps().score_answer {
                let answers = BridgeAnswerScorer::new(Arc::clone(&session), !a.train_responser, &work);
                train(EmState::new(generator, answers), &train_set, &dev_set, &g, &config)?
            } else {
                train(EmState::new(generator, mock_answers), &train_set, &dev_set, &g, &config)?
            }
        }
    };
    write_file(&a.out.join("reports.jsonl"), &outcome.reports)?;
    write_file(&a.out.join("realigner.jsonl"), &jsonl_string("realigner-dataset", &outcome.realigner))?;
    write_file(&a.out.join("responser.jsonl"), &jsonl_string("responser-dataset", &outcome.responser))?;
    schema(out, "em-run")?;
    emit(out, &outcome.summary)
}

#[derive(Debug, Deserialize)]
struct PredRecord {
    id: String,
    answers: Vec<String>,
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let preds: HashMap<String, Vec<String>> = read_jsonl::<PredRecord>(&a.pred)?
        .into_iter()
        .map(|p| (p.id, p.answers))
        .collect();
    let gold = read_jsonl::<QaRecord>(&a.gold)?;
    let pairs: Vec<(AnswerSet, AnswerSet)> = gold
        .iter()
        .map(|r| {
            let pred = preds.get(&r.id).map(Vec::as_slice).unwrap_or_default();
            (AnswerSet::new(pred), AnswerSet::new(&r.answers))
        })
        .collect();
    let missing = gold.iter().filter(|r| !preds.contains_key(&r.id)).count();
    let report = evaluate_dataset(&pairs).map_err(data("eval"))?;
    schema(out, "eval")?;
    let mut v = serde_json::to_value(report).expect("report serializes");
    v["missing_predictions"] = json!(missing);
    emit(out, &v)
}

fn consolidate(a: &ConsolidateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let inputs = read_jsonl::<ConsolidationInput>(&a.input)?;
    let session = a.bridge.session()?;
    schema(out, "consolidate")?;
    for input in &inputs {
        let hyps: Vec<Hypothesis> = input.hypotheses.iter().map(Hypothesis::from).collect();
        let v = match &session {
            Some(s) => {
                let prompt = build_consolidation_prompt(&input.question, &hyps);
                let text = s.consolidate(&prompt).map_err(data(&input.id))?;
                json!({"id": input.id, "answers": parse_consolidator_reply(&text)})
            }
            None => {
                let ranked = consolidate_default(&hyps).map_err(data(&input.id))?;
                json!({"id": input.id, "answers": ranked})
            }
        };
        emit(out, &v)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct GoldChain {
    id: String,
    #[serde(flatten)]
    record: CandidateRecord,
}

fn emit_prompts(a: &EmitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let g = load_kg(&a.graph)?;
    let instances = link_all(&read_jsonl::<QaRecord>(&a.dataset)?, &g)?;
    std::fs::create_dir_all(&a.out).map_err(data(a.out.display()))?;

    let realigner: Vec<Value> = instances
        .iter()
        .map(|i| json!({"id": i.id, "prompt": prompts::realigner_prompt(&i.question, &i.topic_labels(&g))}))
        .collect();
    write_file(&a.out.join("realigner_prompts.jsonl"), &jsonl_string("realigner-prompts", &realigner))?;
    let mut written = vec!["realigner_prompts.jsonl"];

    if let Some(path) = &a.candidates {
        let by_id: HashMap<&str, &QAInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
        let mut cold_start = Vec::new();
        let mut responser = Vec::new();
        let mut grouped: Vec<(&QAInstance, Vec<Hypothesis>)> = Vec::new();
        for gc in read_jsonl::<GoldChain>(path)? {
            let inst = *by_id
                .get(gc.id.as_str())
                .ok_or_else(|| CliError::Data(format!("candidate for unknown instance {:?}", gc.id)))?;
            let z: GraphAwareChain = gc.record.to_chain();
            if let Some(v) = validate_alignment(&z).violations.first() {
                return Err(CliError::Data(format!("{}: {v:?}", gc.id)));
            }
            let resolved = resolve_path(&g, &z.path.triples)?;
            let chain = crate::grammar::serialize_chain(&z.chain).map_err(data(&gc.id))?;
            let path_text = serialize_path(&z.path).map_err(data(&gc.id))?;
            let entities = inst.topic_labels(&g);
            cold_start.push(TrainingExample {
                prompt: prompts::realigner_prompt(&inst.question, &entities),
                completion: prompts::realigner_completion(&chain, &path_text),
            });
            responser.push(json!({
                "id": inst.id,
                "prompt": prompts::responser_prompt(&inst.question, &entities, &chain, &path_text),
            }));
            let answers = expand_answers(&[resolved], &g).map_err(data(&gc.id))?;
            let hyp = Hypothesis {
                path: z.path,
                answers: answer_labels(&g, &answers),
                score: gc.record.logp_gen,
            };
            match grouped.iter_mut().find(|(i, _)| i.id == inst.id) {
                Some((_, hyps)) => hyps.push(hyp),
                None => grouped.push((inst, vec![hyp])),
            }
        }
        let consolidation: Vec<Value> = grouped
            .iter()
            .map(|(i, hyps)| json!({"id": i.id, "prompt": build_consolidation_prompt(&i.question, hyps)}))
            .collect();
        write_file(&a.out.join("realigner_train.jsonl"), &jsonl_string("realigner-dataset", &cold_start))?;
        write_file(&a.out.join("responser_prompts.jsonl"), &jsonl_string("responser-prompts", &responser))?;
        write_file(
            &a.out.join("consolidation_prompts.jsonl"),
            &jsonl_string("consolidation-prompts", &consolidation),
        )?;
        written.extend(["realigner_train.jsonl", "responser_prompts.jsonl", "consolidation_prompts.jsonl"]);
    }
    schema(out, "emit-prompts")?;
    emit(out, &json!({"files": written}))
}

/// Entry point for the binary.
pub fn main_with_env() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
