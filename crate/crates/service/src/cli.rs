//! Command-line front end. Every subcommand exits non-zero with a diagnostic
//! on failure; reports go to `--out` when given, otherwise to stdout.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use notesearch_core::ann::{IndexConfig, Quantization, SearchOverrides, SharedIndex};
use notesearch_core::chunker::ChunkingConfig;
use notesearch_core::embedding::{EmbedderConfig, DEFAULT_QUERY_INSTRUCTION};
use notesearch_core::ingest::{
    generate_synthetic_corpus, read_facts, train_index, IngestOptions, IngestPipeline, PartitionStatus,
    SyntheticCorpusSpec,
};
use notesearch_core::query::{Allowlist, AuditLog, EngineConfig, SearchRequest};
use notesearch_core::store::read_jsonl;
use notesearch_eval::latency::{latency_bench, BenchConfig, PrecomputedEmbedder};
use notesearch_eval::mcqa::{
    items_from_facts, read_items, Answerer, ContainmentAnswerer, FixedAnswerer, KSweepReport, McqaHarness,
    RemoteAnswerer, DEFAULT_K, DEFAULT_RUNS, K_SWEEP,
};
use notesearch_eval::stats::{agreement_summary, bootstrap_agreement_diff, compare_times, AbstractionRecord, Method};
use notesearch_eval::REPORT_SCHEMA_VERSION;
use serde::Serialize;
use serde_json::{json, Value};

use crate::api::{self, AppState};
use crate::datadir::{DataDir, ServiceConfig, CONFIG_SCHEMA_VERSION};
use crate::plot::plot_report;

#[derive(Debug, Parser)]
#[command(name = "notesearch", version, about = "Semantic search over clinical notes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (notes.jsonl, facts.jsonl) with planted facts.
    Synth(SynthArgs),
    /// Train partition centroids and write an empty index plus service.json.
    TrainIndex(TrainArgs),
    /// Chunk, embed and index notes into an existing data directory.
    Ingest(IngestArgs),
    /// train-index followed by ingest of the same notes.
    BuildIndex(TrainArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Concurrency sweep with per-stage latency percentiles.
    BenchLatency(BenchArgs),
    /// Multiple-choice retrieval QA benchmark.
    EvalMcqa(McqaArgs),
    /// Time and agreement statistics for an abstraction study.
    Stats(StatsArgs),
    /// Render a benchmark report as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, env = "NOTESEARCH_DATA_DIR")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub patients: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Notes as JSON lines.
    #[arg(long)]
    pub notes: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub partitions: usize,
    #[arg(long, default_value_t = 8)]
    pub nprobe: usize,
    #[arg(long, default_value_t = 2)]
    pub spill: usize,
    #[arg(long, default_value_t = 200)]
    pub rescore_budget: usize,
    #[arg(long, default_value_t = false)]
    pub no_quantization: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Chunks sampled for centroid training.
    #[arg(long, default_value_t = 20_000)]
    pub sample: usize,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Embedding service URL; the built-in reference embedder is used when absent.
    #[arg(long)]
    pub embedder_url: Option<String>,
    #[arg(long, default_value = DEFAULT_QUERY_INSTRUCTION)]
    pub query_instruction: String,
    #[arg(long, default_value_t = 300)]
    pub chunk_tokens: usize,
    #[arg(long, default_value_t = 50)]
    pub overlap_tokens: usize,
    #[arg(long, default_value_t = 30)]
    pub boundary_window: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub notes: PathBuf,
    /// Add notes not yet in the store as a new batch instead of (re)running partitions.
    #[arg(long)]
    pub incremental: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, env = "NOTESEARCH_BIND", default_value = "127.0.0.1")]
    pub bind: std::net::IpAddr,
    /// 0 picks a free port; the bound address is printed either way.
    #[arg(long, env = "NOTESEARCH_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Note ids that may be displayed, one per line.
    #[arg(long, env = "NOTESEARCH_ALLOWLIST", conflicts_with = "allow_all")]
    pub allowlist: Option<PathBuf>,
    /// Serve every note. Required when no allowlist is given.
    #[arg(long)]
    pub allow_all: bool,
    #[arg(long, env = "NOTESEARCH_AUDIT_LOG")]
    pub audit: Option<PathBuf>,
    #[arg(long, env = "NOTESEARCH_PROJECT", default_value = "default")]
    pub project: String,
    /// Read the index from its snapshot file instead of loading it into memory.
    #[arg(long)]
    pub disk_index: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Questions: facts.jsonl from `synth`, or plain text with one question per line.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10, 20, 40, 80])]
    pub levels: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub queries_per_worker: usize,
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    #[arg(long, default_value_t = 20)]
    pub notes: usize,
    /// Include every query's stage timings in the report.
    #[arg(long)]
    pub samples: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnswererKind {
    Containment,
    First,
    Remote,
}

#[derive(Debug, Args)]
pub struct McqaArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Planted facts from `synth`; items are generated from them.
    #[arg(long, conflicts_with = "items", required_unless_present = "items")]
    pub facts: Option<PathBuf>,
    /// Prepared items as JSON lines.
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    /// Repeat over k in 1,5,10,20,30,40,50 instead of a single k.
    #[arg(long)]
    pub sweep: bool,
    /// Also score with exhaustive retrieval over each patient's chunks.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long, value_enum, default_value_t = AnswererKind::Containment)]
    pub answerer: AnswererKind,
    /// Chat-completions endpoint for `--answerer remote`.
    #[arg(long, required_if_eq("answerer", "remote"))]
    pub answerer_url: Option<String>,
    #[arg(long, default_value = "default")]
    pub model: String,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    /// Seed for option order when generating items from facts.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Abstraction records as JSON lines.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainIndex(a) => train(&a).map(|_| ()),
        Command::Ingest(a) => ingest(&DataDir::new(&a.data.data_dir), &a.notes, a.incremental, a.out.as_deref()),
        Command::BuildIndex(a) => {
            let dir = train(&a)?;
            ingest(&dir, &a.notes, false, None)
        }
        Command::Serve(a) => serve(a),
        Command::BenchLatency(a) => bench(a),
        Command::EvalMcqa(a) => eval_mcqa(a),
        Command::Stats(a) => stats(a),
        Command::Plot(a) => {
            let report: Value = serde_json::from_slice(&std::fs::read(&a.report)?)
                .with_context(|| format!("parsing {}", a.report.display()))?;
            std::fs::write(&a.out, plot_report(&report)?)?;
            Ok(())
        }
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec { num_patients: a.patients, seed: a.seed, ..Default::default() })?;
    corpus.write(&a.out)?;
    eprintln!("wrote {} notes and {} facts to {}", corpus.notes.len(), corpus.facts.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<DataDir> {
    let dir = DataDir::new(&a.data.data_dir);
    dir.create()?;
    let chunking = ChunkingConfig::new(a.chunk_tokens, a.overlap_tokens, a.boundary_window)?;
    let index = IndexConfig {
        num_partitions: a.partitions,
        nprobe: a.nprobe,
        spill: a.spill,
        rescore_budget: a.rescore_budget,
        quantization: if a.no_quantization { Quantization::None } else { Quantization::Scalar8 },
    };
    index.validate()?;
    let cfg = ServiceConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        embedder: EmbedderConfig {
            dimension: a.dim,
            query_instruction: a.query_instruction.clone(),
            provider_id: if a.embedder_url.is_some() { "remote".into() } else { "reference".into() },
        },
        embedder_url: a.embedder_url.clone(),
        index,
        engine: EngineConfig { chunking, ..Default::default() },
    };
    let notes = read_jsonl(&a.notes).with_context(|| format!("reading {}", a.notes.display()))?;
    let trained = train_index(&notes, cfg.embedder()?.as_ref(), chunking, index, a.seed, a.sample)?;
    if dir.index_path().exists() {
        tracing::warn!(path = %dir.index_path().display(), "replacing existing index");
    }
    notesearch_core::ann::save(&trained, &dir.index_path())?;
    dir.write_config(&cfg)?;
    eprintln!("trained {} partitions over {} notes into {}", a.partitions, notes.len(), dir.root().display());
    Ok(dir)
}

fn ingest(dir: &DataDir, notes_path: &Path, incremental: bool, out: Option<&Path>) -> Result<()> {
    let cfg = dir.read_config()?;
    let index = SharedIndex::new(dir.load_index()?);
    let store = Arc::new(dir.open_store()?);
    let notes = read_jsonl(notes_path).with_context(|| format!("reading {}", notes_path.display()))?;
    let pipeline = IngestPipeline::new(
        cfg.embedder()?,
        index.clone(),
        store.clone(),
        cfg.engine.chunking,
        &dir.work_dir(),
        IngestOptions::default(),
    )?;
    let summary = if incremental {
        let r = pipeline.incremental_update(&notes)?;
        serde_json::to_value(r)?
    } else {
        let manifests = pipeline.ingest(&notes)?;
        let failed: Vec<&str> =
            manifests.iter().filter(|m| m.status == PartitionStatus::Failed).map(|m| m.partition_key.as_str()).collect();
        if !failed.is_empty() {
            index.save(&dir.index_path())?;
            bail!("partitions failed: {}", failed.join(", "));
        }
        json!({
            "partitions": manifests.len(),
            "notes": manifests.iter().map(|m| m.note_count).sum::<usize>(),
            "chunks": manifests.iter().map(|m| m.chunk_count).sum::<usize>(),
        })
    };
    index.save(&dir.index_path())?;
    let summary = json!({ "ingest": summary, "indexed_vectors": index.read().len(), "stored_notes": store.len() });
    emit(&summary, out)
}

fn load_allowlist(a: &ServeArgs) -> Result<Allowlist> {
    match (&a.allowlist, a.allow_all) {
        (Some(path), _) => Allowlist::from_file(path).with_context(|| format!("reading allowlist {}", path.display())),
        (None, true) => Ok(Allowlist::Disabled),
        (None, false) => bail!("refusing to serve without --allowlist; pass --allow-all to serve every note"),
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let allowlist = load_allowlist(&a)?;
    let dir = DataDir::new(&a.data.data_dir);
    let engine = dir.open_engine(a.audit.as_deref(), a.disk_index)?;
    let state = Arc::new(AppState { engine, allowlist, project: a.project.clone() });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(SocketAddr::new(a.bind, a.port)).await?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        api::serve(state, listener).await?;
        Ok(())
    })
}

fn read_questions(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(read_facts(path)?.into_iter().map(|f| f.question).collect());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn bench(a: BenchArgs) -> Result<()> {
    let dir = DataDir::new(&a.data.data_dir);
    let questions = read_questions(&a.queries)?;
    if questions.is_empty() {
        bail!("{} holds no questions", a.queries.display());
    }
    let cfg = dir.read_config()?;
    let embedder = PrecomputedEmbedder::warm(cfg.embedder()?, questions.iter().map(String::as_str))?;
    let engine = dir.engine_with(Arc::new(embedder), AuditLog::in_memory(), false)?;
    let requests: Vec<SearchRequest> =
        questions.into_iter().map(|q| SearchRequest { notes_to_retrieve: a.notes, ..SearchRequest::new(q) }).collect();
    let config = BenchConfig { levels: a.levels.clone(), queries_per_worker: a.queries_per_worker, warmup: a.warmup };
    let report = latency_bench(&engine, &requests, &config, a.samples)?;
    emit(&report, a.out.as_deref())
}

fn eval_mcqa(a: McqaArgs) -> Result<()> {
    let dir = DataDir::new(&a.data.data_dir);
    let cfg = dir.read_config()?;
    let mut items = match (&a.items, &a.facts) {
        (Some(path), _) => read_items(path)?,
        (None, Some(path)) => items_from_facts(&read_facts(path)?, a.seed)?,
        (None, None) => bail!("pass --facts or --items"),
    };
    if let Some(n) = a.limit {
        items.truncate(n);
    }
    let harness = McqaHarness::new(
        cfg.embedder()?,
        SharedIndex::new(dir.load_index()?),
        Arc::new(dir.open_store()?),
        cfg.engine.chunking,
    )?
    .with_overrides(SearchOverrides::default());
    let answerer: Box<dyn Answerer> = match a.answerer {
        AnswererKind::Containment => Box::new(ContainmentAnswerer),
        AnswererKind::First => Box::new(FixedAnswerer(0)),
        AnswererKind::Remote => Box::new(RemoteAnswerer::new(
            a.answerer_url.clone().context("--answerer-url is required")?,
            a.model.clone(),
            a.temperature,
            Duration::from_secs(120),
        )),
    };
    let ks: Vec<usize> = if a.sweep { K_SWEEP.to_vec() } else { vec![a.k] };
    let mut report: KSweepReport = harness.k_sweep(&items, answerer.as_ref(), &ks, a.runs)?;
    if a.exhaustive {
        report.runs.push(harness.run_exhaustive(&items, answerer.as_ref(), a.runs)?);
    }
    for r in &report.runs {
        let ci = r.wilson_95.map(|(l, h)| format!("{:.1}%-{:.1}%", l * 100.0, h * 100.0)).unwrap_or_else(|| "n/a".into());
        eprintln!("k={:<6} accuracy {:.1}% ({}/{}, 95% CI {ci}), errored {}", r.k, r.accuracy * 100.0, r.correct, r.total, r.errored);
    }
    emit(&report, a.out.as_deref())
}

fn stats(a: StatsArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.records).with_context(|| format!("reading {}", a.records.display()))?;
    let mut by_task: BTreeMap<String, Vec<AbstractionRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: AbstractionRecord = serde_json::from_str(line).with_context(|| format!("record on line {}", i + 1))?;
        by_task.entry(r.task_id.clone()).or_default().push(r);
    }
    let median = |rs: &[AbstractionRecord], m: Method| {
        let mut t: Vec<f64> = rs.iter().filter(|r| r.method == m).map(|r| r.time_seconds).collect();
        t.sort_by(f64::total_cmp);
        (!t.is_empty()).then(|| notesearch_eval::latency::percentile(&t, 0.5))
    };
    let tasks: Vec<Value> = by_task
        .iter()
        .map(|(task, rs)| {
            let agreement = agreement_summary(rs);
            let bootstrap = bootstrap_agreement_diff(rs, a.resamples, a.seed);
            json!({
                "task_id": task,
                "records": rs.len(),
                "median_seconds": { "ehr": median(rs, Method::Ehr), "semantic": median(rs, Method::Semantic) },
                "time_test": compare_times(rs).map_err(|e| e.to_string()),
                "agreement": agreement.map_err(|e| e.to_string()),
                "bootstrap": bootstrap.map_err(|e| e.to_string()),
            })
        })
        .collect();
    emit(&json!({ "schema_version": REPORT_SCHEMA_VERSION, "kind": "stats", "tasks": tasks }), a.out.as_deref())
}
