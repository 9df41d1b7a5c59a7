//! The `iskg` command line. Exit codes: 0 success, 1 user error (bad
//! arguments, unreadable or malformed input), 2 internal error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use iskg_core::apps::{answer, SlotKeywords, VocabularyExtractor};
use iskg_core::corpus::{generate_synthetic, parse_corpus, split, write_corpus, Dataset, Split, SplitRatio, SynthGrammar};
use iskg_core::graph::{build_triples, export_cypher, export_json, extracted_entities, sentence_entities, BuiltTriples, GraphStore};
use iskg_core::model::{Hainex, LossKind};
use iskg_core::parallel::Execution;
use iskg_core::trainer::{evaluate, init_model, train, train_with_log, TrainConfig, TrainError};
use thiserror::Error;

use crate::api::{load_graph, save_graph, AppState, ExtractResponse};
use crate::config::ServiceConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::User(_) => 1,
            Self::Internal(_) => 2,
        }
    }
}

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "iskg", version, about = "Industrial-safety knowledge graph tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labeled corpus.
    Generate(GenerateArgs),
    /// Train an extraction model on a labeled corpus.
    Train(TrainArgs),
    /// Score a model on one split of a labeled corpus.
    Eval(EvalArgs),
    /// Label raw text and print spans as JSON.
    Extract(ExtractArgs),
    /// Build a fresh graph from a corpus's gold labels.
    BuildGraph(BuildGraphArgs),
    /// Add descriptions to an existing (or new) graph file.
    Ingest(IngestArgs),
    /// Print a graph as Cypher or JSON.
    Export(ExportArgs),
    /// Answer a question from the graph and print the answers as JSON.
    Ask(AskArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the gold events as JSON lines.
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Seed of the train/val/test shuffle.
    #[arg(long, default_value_t = 7)]
    pub split_seed: u64,
    #[arg(long, default_value = "8:1:1")]
    pub split_ratio: SplitRatio,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Il,
    Mle,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint base path; writes `<out>.json` and `<out>.bin`.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallel: bool,
    /// Per-epoch JSON lines; stderr when absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[command(flatten)]
    pub split_args: SplitArgs,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(required = true)]
    pub text: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Graph file to update; created when missing.
    #[arg(long)]
    pub graph: PathBuf,
    /// Labeled corpus; its gold labels give the entities.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// One raw description per line; needs `--model`.
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GraphSource {
    #[arg(long, conflicts_with = "demo")]
    pub graph: Option<PathBuf>,
    /// Use the built-in demo graph.
    #[arg(long)]
    pub demo: bool,
}

impl GraphSource {
    fn load(&self) -> Result<GraphStore, CliError> {
        match (&self.graph, self.demo) {
            (Some(p), _) => load_graph(p).map_err(user),
            (None, true) => Ok(iskg_core::fixtures::demo_store()),
            (None, false) => Err(user("either --graph or --demo is required")),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ExportFormat {
    Cypher,
    Json,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub source: GraphSource,
    #[arg(long, value_enum, default_value = "cypher")]
    pub format: ExportFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[command(flatten)]
    pub source: GraphSource,
    #[arg(short, default_value_t = 3)]
    pub k: usize,
    pub question: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub demo: bool,
}

/// Parses `args` (program name first) and runs the command, writing
/// results to `out`. Help and version requests print and succeed.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}").map_err(internal)?;
            return Ok(());
        }
        Err(e) => return Err(user(e.render())),
    };
    match cli.command {
        Command::Generate(a) => generate(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Extract(a) => extract(a, out),
        Command::BuildGraph(a) => build_graph(a, out),
        Command::Ingest(a) => ingest(a, out),
        Command::Export(a) => export(a, out),
        Command::Ask(a) => ask(a, out),
        Command::Serve(a) => serve(a),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| user(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Dataset, CliError> {
    parse_corpus(&read(path)?).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Hainex, CliError> {
    Hainex::load(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn json_line(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(internal)?;
    writeln!(out, "{text}").map_err(internal)
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus = generate_synthetic(&SynthGrammar::default_hazop(a.seed), a.n);
    write_file(&a.out, &write_corpus(&corpus.dataset.sentences))?;
    if let Some(path) = &a.events {
        let lines: Vec<String> = corpus.events.iter().map(|e| e.to_json()).collect();
        write_file(path, &(lines.join("\n") + "\n"))?;
    }
    writeln!(out, "wrote {} sentences to {}", corpus.dataset.len(), a.out.display()).map_err(internal)
}

fn split_corpus(path: &Path, s: &SplitArgs) -> Result<Dataset, CliError> {
    split(&load_corpus(path)?, s.split_ratio, s.split_seed).map_err(user)
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::EmptyTrainSplit | TrainError::Config(_) | TrainError::Toml(_) => user(e),
        _ => internal(e),
    }
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&read(p)?).map_err(|e| user(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(l) = a.loss {
        cfg.loss = match l {
            LossArg::Il => LossKind::Il,
            LossArg::Mle => LossKind::Mle,
        };
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if a.parallel {
        cfg.execution = Execution::Parallel;
    }
    cfg.validate().map_err(train_error)?;
    let ds = split_corpus(&a.corpus, &a.split)?;
    let model = init_model(&ds, &cfg).map_err(train_error)?;
    let outcome = match &a.log {
        Some(p) => train_with_log(model, &ds, &cfg, p),
        None => train(model, &ds, &cfg, Some(&mut std::io::stderr())),
    }
    .map_err(train_error)?;
    outcome.model.save(&a.out).map_err(internal)?;
    let m = evaluate(&outcome.model, &ds.part(Split::Val), cfg.execution).map_err(internal)?;
    writeln!(out, "kept epoch {} of {}", outcome.best_epoch, cfg.epochs).map_err(internal)?;
    write!(out, "{}", m.table("val")).map_err(internal)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let ds = split_corpus(&a.corpus, &a.split_args)?;
    let part = ds.part(a.split);
    if part.is_empty() {
        return Err(user(format!("split {:?} is empty", a.split)));
    }
    let m = evaluate(&model, &part, Execution::Parallel).map_err(user)?;
    let title = format!("{:?}", a.split).to_lowercase();
    write!(out, "{}", m.table(&title)).map_err(internal)
}

fn extract(a: ExtractArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let text = a.text.join(" ");
    let (labels, spans) = model.extract(&text).map_err(user)?;
    json_line(out, &ExtractResponse { labels, spans })
}

fn corpus_triples(ds: &Dataset) -> Result<Vec<BuiltTriples>, CliError> {
    let tok = ds.tokenizer();
    ds.sentences
        .iter()
        .map(|s| Ok(build_triples(&s.id, &sentence_entities(s, tok).map_err(user)?)))
        .collect()
}

fn report(out: &mut dyn Write, store: &GraphStore, nodes: usize, edges: usize, path: &Path) -> Result<(), CliError> {
    writeln!(
        out,
        "added {nodes} nodes and {edges} edges; {} has {} nodes, {} edges",
        path.display(),
        store.node_count(),
        store.edge_count()
    )
    .map_err(internal)
}

fn build_graph(a: BuildGraphArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let built = corpus_triples(&load_corpus(&a.input)?)?;
    let store = iskg_core::graph::build_store(&built);
    save_graph(&store, &a.out).map_err(|e| user(format!("{}: {e}", a.out.display())))?;
    report(out, &store, store.node_count(), store.edge_count(), &a.out)
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut built = Vec::new();
    if let Some(p) = &a.corpus {
        built.extend(corpus_triples(&load_corpus(p)?)?);
    }
    if let Some(p) = &a.text {
        let model = load_model(a.model.as_deref().ok_or_else(|| user("--text needs --model"))?)?;
        let stem = p.file_stem().map_or("text".into(), |s| s.to_string_lossy().into_owned());
        for (i, line) in read(p)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (_, spans) = model.extract(line).map_err(|e| user(format!("{}:{}: {e}", p.display(), i + 1)))?;
            built.push(build_triples(&format!("{stem}:{}", i + 1), &extracted_entities(&spans)));
        }
    }
    if built.is_empty() {
        return Err(user("nothing to ingest: pass --corpus and/or --text"));
    }
    let mut store = if a.graph.exists() { load_graph(&a.graph).map_err(user)? } else { GraphStore::new() };
    let (mut nodes, mut edges) = (0, 0);
    for b in &built {
        let s = store.ingest(b);
        nodes += s.nodes_added;
        edges += s.edges_added;
    }
    save_graph(&store, &a.graph).map_err(|e| user(format!("{}: {e}", a.graph.display())))?;
    report(out, &store, nodes, edges, &a.graph)
}

fn export(a: ExportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let store = a.source.load()?;
    let text = match a.format {
        ExportFormat::Cypher => export_cypher(&store),
        ExportFormat::Json => export_json(&store),
    };
    match &a.out {
        Some(p) => write_file(p, &text),
        None => out.write_all(text.as_bytes()).map_err(internal),
    }
}

fn ask(a: AskArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let store = a.source.load()?;
    let extractor = VocabularyExtractor::from_store(&store);
    let ans = answer(&store, &a.question, a.k, &extractor, &SlotKeywords::default()).map_err(user)?;
    json_line(out, &ans)
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut config = ServiceConfig::load(a.config.as_deref()).map_err(user)?;
    if let Some(v) = a.addr {
        config.addr = v;
    }
    if a.model.is_some() {
        config.model = a.model;
    }
    if a.graph.is_some() {
        config.graph = a.graph;
    }
    if a.static_dir.is_some() {
        config.static_dir = a.static_dir;
    }
    config.demo |= a.demo;
    let state = AppState::from_config(&config).map_err(user)?;
    let runtime = tokio::runtime::Runtime::new().map_err(internal)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.addr)
            .await
            .map_err(|e| user(format!("cannot bind {}: {e}", config.addr)))?;
        tracing::info!("listening on {}", config.addr);
        axum::serve(listener, crate::api::router(state, &config))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(internal)
    })
}
