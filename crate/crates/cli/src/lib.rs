//! Command-line front end: every pipeline stage as a subcommand.
//!
//! Exit codes are 0 on success, 1 for usage or configuration errors and 2
//! for runtime failures. Results go to files or stdout; diagnostics go to
//! stderr.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use living_novel::alignment::{
    attach_context, export_dataset, gen_cre_dataset, gen_persona_dataset, read_dataset, DatasetKind, Generated,
    LlmTeacher, PreferenceTuple, TPolicy, Teacher, TemplateTeacher,
};
use living_novel::embed::HashEmbedder;
use living_novel::eval::{
    make_rt_suite, make_tt_suite, run_suite, ChatSystem, EvalSuite, Judge, LlmJudge, RuleJudge, DEFAULT_PARALLELISM,
    DEFAULT_SUITE_SIZE, SuiteKind,
};
use living_novel::graph::{build_graph, DiegeticGraph};
use living_novel::grpo::{score_groups, train_toy, GroupInput, ToyPolicy, ToyTask};
use living_novel::ingest::{
    ingest_novel, validate_bundle, CharacterProfile, ExtractionBundle, ExtractorClient, LlmExtractor,
    RuleBasedExtractor, DEFAULT_CHAPTER_PATTERN, DEFAULT_SPAN_BUDGET,
};
use living_novel::jsonl::{read_jsonl, write_jsonl};
use living_novel::llm::{ChatClient, ClientError, HttpChatClient, Role};
use living_novel::retrieval::{HeuristicAnalyzer, RetrievalParams, Retriever, DEFAULT_K, DEFAULT_POOL};
use living_novel::{GrpoConfigF64, RewardWeightsF64, ScoredGroupF64, StoryTime};
use living_novel_service::{Backends, ChatService, SessionLog, Target, TurnEvent, TurnRequest};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "living-novel", version, about = "Spoiler-safe character chat over a novel")]
pub struct Cli {
    /// Never construct a network client; remote extractors, teachers,
    /// judges and generators become configuration errors.
    #[arg(long, global = true)]
    pub offline: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment and extract a novel into a validated bundle.
    Ingest(IngestArgs),
    /// Build the story-time graph from a bundle.
    Build(BuildArgs),
    /// Print the gated context retrieved for a question.
    Query(QueryArgs),
    /// Generate a preference dataset.
    GenData(GenDataArgs),
    /// Score candidate groups against their preference pairs.
    Score(ScoreArgs),
    /// Train a toy categorical policy on one scored group.
    TrainToy(TrainToyArgs),
    /// Generate a TT or RT evaluation suite.
    GenSuite(GenSuiteArgs),
    /// Run the chat service over HTTP until interrupted.
    Serve(ServeArgs),
    /// Run an evaluation suite against a chat system.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    /// Deterministic local implementation.
    Rule,
    /// Remote model configured through LIVING_NOVEL_* environment variables.
    Llm,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Plain-text novel.
    pub novel: PathBuf,
    /// JSON array of seed character profiles.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Backend::Rule)]
    pub extractor: Backend,
    /// Regex matching chapter heading lines.
    #[arg(long, default_value = DEFAULT_CHAPTER_PATTERN)]
    pub chapter_pattern: String,
    /// Maximum span length in characters.
    #[arg(long, default_value_t = DEFAULT_SPAN_BUDGET)]
    pub span_budget: usize,
    /// Bundle output path.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    pub bundle: PathBuf,
    /// Graph output path.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub graph: PathBuf,
    /// Question to retrieve context for.
    #[arg(long)]
    pub q: String,
    /// Story-time ordinal; nothing anchored later is returned.
    #[arg(long)]
    pub t: u32,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Candidates kept per level before the gate.
    #[arg(long, default_value_t = DEFAULT_POOL)]
    pub pool: usize,
    /// Character asking, recorded in the output.
    #[arg(long, default_value = "")]
    pub character: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Persona,
    GeneralQa,
    TemporalAdversarial,
    OutOfDomain,
}

impl From<KindArg> for DatasetKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Persona => DatasetKind::Persona,
            KindArg::GeneralQa => DatasetKind::GeneralQa,
            KindArg::TemporalAdversarial => DatasetKind::TemporalAdversarial,
            KindArg::OutOfDomain => DatasetKind::OutOfDomain,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    pub graph: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Tuples to generate (per character for persona data).
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Persona data only: restrict to one character.
    #[arg(long)]
    pub character: Option<String>,
    /// Fix every question at this story time instead of drawing it.
    #[arg(long)]
    pub t: Option<u32>,
    /// Attach this many retrieved context items to question tuples; 0 disables.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub context_k: usize,
    #[arg(long, value_enum, default_value_t = Backend::Rule)]
    pub teacher: Backend,
    /// Dataset output path (JSONL).
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Preference dataset (JSONL); the i-th tuple has prompt id `p{i}`.
    pub dataset: PathBuf,
    /// JSONL of `{"prompt_id", "candidates"}`; without it each group is
    /// the tuple's own `[o_pos, o_neg]`.
    pub candidates: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    pub w_sim: f64,
    #[arg(long, default_value_t = 0.3)]
    pub w_form: f64,
    /// Scored-group output path (JSONL).
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Scored groups (JSONL) as written by `score`.
    pub scored: PathBuf,
    /// Which group to train on.
    #[arg(long, default_value_t = 0)]
    pub group: usize,
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample groups from the policy instead of anchoring the best candidate.
    #[arg(long)]
    pub sampled: bool,
    #[arg(long, default_value_t = 0.7)]
    pub w_sim: f64,
    #[arg(long, default_value_t = 0.3)]
    pub w_form: f64,
    /// Report output path (JSON).
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Tt,
    Rt,
}

#[derive(Debug, Args)]
pub struct GenSuiteArgs {
    pub graph: PathBuf,
    #[arg(long, value_enum)]
    pub kind: SuiteArg,
    /// Story time the questions are asked at.
    #[arg(long)]
    pub t: u32,
    #[arg(long, default_value_t = DEFAULT_SUITE_SIZE)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Graph or bundle to load at startup.
    pub graph: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Persist sessions in this directory.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Suite file written by `gen-suite`.
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, value_enum, default_value_t = Backend::Rule)]
    pub judge: Backend,
    /// Running chat service to evaluate; needs `--novel-id`.
    #[arg(long, conflicts_with = "graph")]
    pub system_url: Option<String>,
    #[arg(long, requires = "system_url")]
    pub novel_id: Option<String>,
    /// Evaluate an in-process offline service over this graph instead.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub character: String,
    #[arg(long, default_value_t = DEFAULT_PARALLELISM)]
    pub parallelism: usize,
    /// Report output path (JSON).
    #[arg(long, short)]
    pub out: PathBuf,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let offline = cli.offline;
    match cli.command {
        Command::Ingest(a) => ingest(a, offline),
        Command::Build(a) => build(a),
        Command::Query(a) => query(a),
        Command::GenData(a) => gen_data(a, offline),
        Command::Score(a) => score(a),
        Command::TrainToy(a) => train(a),
        Command::GenSuite(a) => gen_suite(a),
        Command::Serve(a) => serve(a, offline),
        Command::Eval(a) => eval(a, offline),
    }
}

/// A remote chat client for `role`, refused under `--offline`.
fn remote(role: Role, flag: &str, offline: bool) -> Result<HttpChatClient, CliError> {
    if offline {
        return Err(config(format!("{flag} llm needs the network and cannot be used with --offline")));
    }
    HttpChatClient::from_env(role).map_err(config)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Write to stdout; a closed pipe (`| head`) is not an error.
fn print_stdout(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
        _ => Ok(()),
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn load_graph(path: &Path) -> Result<DiegeticGraph, CliError> {
    DiegeticGraph::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn ingest(a: IngestArgs, offline: bool) -> Result<(), CliError> {
    let extractor: Box<dyn ExtractorClient> = match a.extractor {
        Backend::Rule => Box::new(RuleBasedExtractor),
        Backend::Llm => Box::new(LlmExtractor::new(Box::new(remote(Role::Extractor, "--extractor", offline)?))),
    };
    let text = read_text(&a.novel)?;
    let profiles: Vec<CharacterProfile> = match &a.profiles {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| runtime(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    let run = ingest_novel(&text, &a.chapter_pattern, a.span_budget, &profiles, extractor.as_ref()).map_err(runtime)?;
    warn_all(&run.segmentation_warnings);
    for w in &run.report.warnings {
        eprintln!("warning: {w}");
    }
    run.bundle.save(&a.out).map_err(runtime)?;
    if !run.report.is_ok() {
        for e in &run.report.errors {
            eprintln!("invalid: {e}");
        }
        return Err(runtime(format!("bundle has {} validation error(s)", run.report.errors.len())));
    }
    Ok(())
}

fn build(a: BuildArgs) -> Result<(), CliError> {
    let bundle = ExtractionBundle::load(&a.bundle).map_err(|e| runtime(format!("{}: {e}", a.bundle.display())))?;
    let report = validate_bundle(&bundle);
    if !report.is_ok() {
        for e in &report.errors {
            eprintln!("invalid: {e}");
        }
        return Err(runtime(format!("bundle has {} validation error(s)", report.errors.len())));
    }
    let graph = build_graph(&bundle).map_err(runtime)?;
    graph.save(&a.out).map_err(runtime)
}

fn query(a: QueryArgs) -> Result<(), CliError> {
    let graph = Arc::new(load_graph(&a.graph)?);
    let analyzer = HeuristicAnalyzer::for_graph(&graph);
    let retriever = Retriever::new(graph, Arc::new(HashEmbedder::default())).map_err(runtime)?;
    let params = RetrievalParams { k: a.k, pool: a.pool };
    let bundle = retriever.retrieve(&a.q, a.t, &a.character, params, &analyzer).map_err(runtime)?;
    print_stdout(&(serde_json::to_string_pretty(&bundle).map_err(runtime)? + "\n"))
}

fn gen_data(a: GenDataArgs, offline: bool) -> Result<(), CliError> {
    let kind = DatasetKind::from(a.kind);
    if a.character.is_some() && kind != DatasetKind::Persona {
        return Err(config("--character only applies to --kind persona"));
    }
    let teacher: Box<dyn Teacher> = match a.teacher {
        Backend::Rule => Box::new(TemplateTeacher),
        Backend::Llm => Box::new(LlmTeacher::new(Box::new(remote(Role::Teacher, "--teacher", offline)?))),
    };
    let graph = Arc::new(load_graph(&a.graph)?);
    let mut tuples: Vec<PreferenceTuple> = Vec::new();
    if kind == DatasetKind::Persona {
        let profiles: Vec<&CharacterProfile> = match &a.character {
            Some(name) => {
                vec![graph.profile(name).ok_or_else(|| runtime(format!("no character named {name:?}")))?]
            }
            None => graph.profiles.iter().collect(),
        };
        // a fixed story time narrows the timeline to that one entry
        let timeline: Vec<StoryTime> = match a.t {
            Some(t) => vec![graph.story_time(t).map_err(runtime)?.clone()],
            None => graph.timeline.clone(),
        };
        for profile in profiles {
            let Generated { mut items, warnings } =
                gen_persona_dataset(profile, &timeline, a.n, a.seed, teacher.as_ref()).map_err(runtime)?;
            warn_all(&warnings);
            tuples.append(&mut items);
        }
    } else {
        let policy = a.t.map_or(TPolicy::Uniform, TPolicy::Fixed);
        let generated = gen_cre_dataset(&graph, kind, a.n, policy, a.seed, teacher.as_ref()).map_err(runtime)?;
        warn_all(&generated.warnings);
        tuples = generated.items;
        if a.context_k > 0 {
            let analyzer = HeuristicAnalyzer::for_graph(&graph);
            let retriever = Retriever::new(graph.clone(), Arc::new(HashEmbedder::default())).map_err(runtime)?;
            tuples = tuples
                .iter()
                .map(|t| attach_context(t, &retriever, &analyzer, a.context_k))
                .collect::<Result<_, _>>()
                .map_err(runtime)?;
        }
    }
    export_dataset(&tuples, &a.out).map_err(runtime)
}

/// Candidate list for one prompt, as read by `score`.
#[derive(Debug, serde::Deserialize)]
struct CandidateLine {
    prompt_id: String,
    candidates: Vec<String>,
}

fn score(a: ScoreArgs) -> Result<(), CliError> {
    let weights = RewardWeightsF64::new(a.w_sim, a.w_form).map_err(config)?;
    let tuples = read_dataset(&a.dataset).map_err(|e| runtime(format!("{}: {e}", a.dataset.display())))?;
    let inputs: Vec<GroupInput> = match &a.candidates {
        None => tuples
            .iter()
            .enumerate()
            .map(|(i, t)| GroupInput {
                prompt_id: format!("p{i}"),
                candidates: vec![t.o_pos.clone(), t.o_neg.clone()],
                o_pos: t.o_pos.clone(),
                o_neg: t.o_neg.clone(),
            })
            .collect(),
        Some(path) => {
            let lines: Vec<CandidateLine> =
                read_jsonl(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            lines
                .into_iter()
                .map(|l| {
                    let t = l
                        .prompt_id
                        .strip_prefix('p')
                        .and_then(|i| i.parse::<usize>().ok())
                        .and_then(|i| tuples.get(i))
                        .ok_or_else(|| runtime(format!("unknown prompt id {:?}", l.prompt_id)))?;
                    Ok(GroupInput { prompt_id: l.prompt_id, candidates: l.candidates, o_pos: t.o_pos.clone(), o_neg: t.o_neg.clone() })
                })
                .collect::<Result<_, CliError>>()?
        }
    };
    let run = score_groups(&inputs, &weights, &HashEmbedder::default()).map_err(runtime)?;
    warn_all(&run.warnings);
    write_jsonl(&a.out, &run.groups).map_err(runtime)
}

fn train(a: TrainToyArgs) -> Result<(), CliError> {
    let weights = RewardWeightsF64::new(a.w_sim, a.w_form).map_err(config)?;
    let config_ = GrpoConfigF64 {
        beta: a.beta,
        group_size: a.group_size,
        learning_rate: a.learning_rate,
        steps: a.steps,
        seed: a.seed,
        line_search: true,
    };
    config_.validate().map_err(config)?;
    let groups: Vec<ScoredGroupF64> = read_jsonl(&a.scored).map_err(|e| runtime(format!("{}: {e}", a.scored.display())))?;
    let group = groups
        .get(a.group)
        .ok_or_else(|| runtime(format!("{} holds {} group(s); no group {}", a.scored.display(), groups.len(), a.group)))?;
    let best = group
        .rewards
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(&x.0)))
        .map(|(i, _)| i);
    let task = ToyTask {
        candidates: group.candidates.clone(),
        o_pos: group.o_pos.clone(),
        o_neg: group.o_neg.clone(),
        anchor_index: if a.sampled { None } else { best },
    };
    let initial = ToyPolicy::uniform(task.candidates.len());
    let report = train_toy(&task, &initial, &config_, &weights, &HashEmbedder::default()).map_err(runtime)?;
    if let (Some(i), Some(first), Some(last)) = (best, report.probs.first(), report.probs.last()) {
        eprintln!("candidate {i}: probability {:.6} -> {:.6} over {} step(s)", first[i], last[i], a.steps);
    }
    write_text(&a.out, &(serde_json::to_string_pretty(&report).map_err(runtime)? + "\n"))
}

fn gen_suite(a: GenSuiteArgs) -> Result<(), CliError> {
    let graph = load_graph(&a.graph)?;
    let suite = match a.kind {
        SuiteArg::Tt => make_tt_suite(&graph, a.t, a.n, a.seed),
        SuiteArg::Rt => make_rt_suite(graph.story_time(a.t).map_err(runtime)?.clone(), a.n, a.seed),
    }
    .map_err(runtime)?;
    suite.save(&a.out).map_err(runtime)
}

/// Load a graph file, or build one from a bundle file.
fn load_graph_or_bundle(path: &Path) -> Result<DiegeticGraph, CliError> {
    let text = read_text(path)?;
    match DiegeticGraph::from_json(&text) {
        Ok(g) => Ok(g),
        Err(graph_err) => match ExtractionBundle::from_json(&text) {
            Ok(b) => build_graph(&b).map_err(|e| runtime(format!("{}: {e}", path.display()))),
            Err(_) => Err(runtime(format!("{}: {graph_err}", path.display()))),
        },
    }
}

fn serve(a: ServeArgs, offline: bool) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| config(format!("bad listen address {}:{}: {e}", a.host, a.port)))?;
    let mut backends = Backends::offline();
    if !offline {
        let client: Arc<dyn ChatClient> = Arc::new(HttpChatClient::from_env(Role::Generator).map_err(|e| {
            config(format!("{e}, or pass --offline for the echo generator"))
        })?);
        backends.generator = client;
    }
    let mut service = ChatService::new(backends);
    if let Some(dir) = &a.state_dir {
        service = service.with_log(SessionLog::on_disk(dir).map_err(runtime)?).map_err(runtime)?;
    }
    let service = Arc::new(service);
    if let Some(path) = &a.graph {
        let id = service.add_graph(load_graph_or_bundle(path)?).map_err(runtime)?;
        eprintln!("loaded {} as {id}", path.display());
    }
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async move {
        let listener = living_novel_service::http::bind(addr).await.map_err(runtime)?;
        let local = listener.local_addr().map_err(runtime)?;
        eprintln!("listening on http://{local}");
        tracing::info!(%local, offline, "serving");
        tokio::select! {
            r = living_novel_service::http::serve(listener, service) => r.map_err(runtime),
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })
}

/// An in-process service answering each question in a fresh session.
struct LocalSystem {
    service: Arc<ChatService>,
    novel_id: String,
}

impl ChatSystem for LocalSystem {
    fn label(&self) -> String {
        format!("local ({})", self.novel_id)
    }

    fn ask(&self, character: &str, t: &StoryTime, question: &str) -> Result<String, ClientError> {
        let other = |e: living_novel_service::ServiceError| ClientError::Other(e.to_string());
        let session = self.service.create_session(&self.novel_id, &[character.to_string()], t.ordinal).map_err(other)?;
        let request = TurnRequest {
            session_id: session.session_id,
            text: question.to_string(),
            t_current: None,
            target: Target::character(character),
        };
        let mut answer = None;
        self.service
            .post_message(&request, &mut |e| {
                if let TurnEvent::Done { text, .. } = e {
                    answer = Some(text);
                }
            })
            .map_err(other)?;
        answer.ok_or_else(|| ClientError::Malformed("turn finished without a reply".into()))
    }
}

fn eval(a: EvalArgs, offline: bool) -> Result<(), CliError> {
    if a.system_url.is_some() && offline {
        return Err(config("--system-url needs the network and cannot be used with --offline"));
    }
    if a.system_url.is_some() && a.novel_id.is_none() {
        return Err(config("--system-url needs --novel-id"));
    }
    if a.system_url.is_none() && a.graph.is_none() {
        return Err(config("give either --system-url with --novel-id, or --graph"));
    }
    if a.parallelism == 0 {
        return Err(config("--parallelism must be at least 1"));
    }
    let judge: Box<dyn Judge> = match a.judge {
        Backend::Rule => Box::new(RuleJudge),
        Backend::Llm => Box::new(LlmJudge::new(Box::new(remote(Role::Judge, "--judge", offline)?))),
    };
    let suite = EvalSuite::load(&a.suite).map_err(|e| runtime(format!("{}: {e}", a.suite.display())))?;
    let system: Box<dyn ChatSystem> = match (&a.system_url, &a.graph) {
        (Some(url), _) => Box::new(living_novel_service::HttpSystem::new(url.clone(), a.novel_id.clone().unwrap_or_default())),
        (None, Some(path)) => {
            let service = Arc::new(ChatService::offline());
            let novel_id = service.add_graph(load_graph_or_bundle(path)?).map_err(runtime)?;
            Box::new(LocalSystem { service, novel_id })
        }
        (None, None) => unreachable!("checked above"),
    };
    let report = run_suite(&suite, system.as_ref(), &a.character, judge.as_ref(), a.parallelism).map_err(runtime)?;
    let label = match suite.kind {
        SuiteKind::Rt => "RT",
        SuiteKind::Tt => "TT",
    };
    eprintln!("{label}: {}/{} correct ({:.1})", report.correct, report.size, report.score);
    write_text(&a.out, &report.to_json())
}
