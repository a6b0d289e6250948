//! Command-line interface for the APGL4SR training and evaluation engine.
//!
//! Subcommands cover the whole pipeline: raw-log preparation, global graph
//! construction, training, full-ranking evaluation, the factored-vs-dense
//! scaling benchmark, synthetic data generation, 2-D embedding export, and
//! finite-difference gradient checking. `--seed`, `--config` and `--out`
//! are accepted by every subcommand.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use apgl_core::config::{load_train_config, split_assignment};
use apgl_core::dataio::{self, Dataset, ParseOptions};
use apgl_core::evaluate::{evaluate, Split};
use apgl_core::graph::{build_graph, GraphBuildConfig, SparseGraph};
use apgl_core::project::export_projection;
use apgl_core::scaling::{bench_svd, BenchConfig};
use apgl_core::synth::{gen_synthetic, SynthConfig};
use apgl_core::trainer::{fit, gradient_check, prepare_batch, Model, TrainConfig};
use apgl_core::Container;

#[derive(Parser)]
#[command(name = "apgl", version, about = "APGL4SR training and evaluation engine")]
struct Cli {
    /// Master seed; overrides the config file where one applies.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path; meaning depends on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a raw interaction log into a packed dataset.
    Prepare(PrepareArgs),
    /// Build the co-occurrence item graph from a prepared dataset.
    BuildGraph(BuildGraphArgs),
    /// Train a model and write the checkpoint plus a JSONL loss log.
    Train(TrainArgs),
    /// Rank the held-out item for every user and report metrics.
    Eval(EvalArgs),
    /// Measure factored vs. dense propagation scaling.
    BenchSvd(BenchSvdArgs),
    /// Generate a synthetic interaction log with planted clusters.
    GenSynth(GenSynthArgs),
    /// Export item embeddings projected to 2-D as CSV.
    Project(ProjectArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw log: one `user<delim>item<delim>timestamp` record per line.
    #[arg(long)]
    input: PathBuf,
    /// Field delimiter.
    #[arg(long, default_value_t = '\t')]
    delimiter: char,
    /// Fail on any malformed line instead of skipping it.
    #[arg(long)]
    strict: bool,
    /// Drop users and items with fewer interactions, repeated to a fixpoint.
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    /// Keep only the most recent interactions per user.
    #[arg(long, default_value_t = 50)]
    max_len: usize,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Co-occurrence window: offsets 1..=window contribute 1/offset.
    #[arg(long, default_value_t = 2)]
    window: usize,
    #[arg(long, default_value_t = 1.0)]
    self_loop_weight: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// Inline config override, `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// JSONL loss log path; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Item graph; required when the checkpoint uses the personalized bias.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Score every candidate even if the user already interacted with it.
    #[arg(long)]
    no_exclude_seen: bool,
}

#[derive(Args)]
struct BenchSvdArgs {
    /// Comma-separated node counts, at least four, ascending.
    #[arg(long, default_value = "1000,2000,4000,8000", value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    d_prime: usize,
    #[arg(long, default_value_t = 16)]
    nnz_per_row: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 200)]
    num_items: usize,
    #[arg(long, default_value_t = 4)]
    num_clusters: usize,
    #[arg(long, default_value_t = 2000)]
    num_users: usize,
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long, default_value_t = 0.15)]
    cross_cluster_prob: f64,
    #[arg(long, default_value_t = 0.5)]
    globality_mix: f64,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Users in the probe batch (taken from the start of the id range).
    #[arg(long, default_value_t = 4)]
    batch_users: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Largest tolerated relative error; exceeding it fails the command.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(format!("expected valid|test, got '{s}'")),
    }
}

fn require_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.clone()
        .with_context(|| format!("--out is required: {what}"))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_graph(path: &Path) -> Result<SparseGraph> {
    let c = Container::read_from(path)
        .with_context(|| format!("reading graph container {}", path.display()))?;
    SparseGraph::from_container(&c)
        .with_context(|| format!("decoding graph {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    let c = Container::read_from(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    Model::from_container(&c).with_context(|| format!("decoding checkpoint {}", path.display()))
}

/// Training configuration from file + `--set` overrides + `--seed`, with
/// `max_len` adopted from the dataset unless explicitly pinned.
fn resolve_train_config(
    config: &Option<PathBuf>,
    sets: &[String],
    seed: Option<u64>,
    dataset: &Dataset,
) -> Result<TrainConfig> {
    let overrides: Vec<(String, String)> = sets
        .iter()
        .map(|s| split_assignment(s).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let mut cfg = load_train_config(config.as_deref(), &overrides)?;
    let max_len_pinned = overrides.iter().any(|(k, _)| k == "max_len")
        || config_mentions(config.as_deref(), "max_len")?;
    if max_len_pinned {
        if cfg.max_len != dataset.max_len() {
            bail!(
                "configured max_len {} does not match the dataset's {}",
                cfg.max_len,
                dataset.max_len()
            );
        }
    } else {
        cfg.max_len = dataset.max_len();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn config_mentions(path: Option<&Path>, key: &str) -> Result<bool> {
    let Some(p) = path else { return Ok(false) };
    let text =
        std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
    Ok(apgl_core::config::parse_config_text(&text)?
        .iter()
        .any(|(k, _)| k == key))
}

fn create_out(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("creating {}", path.display())
    })?))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Prepare(args) => cmd_prepare(args, &cli.out),
        Cmd::BuildGraph(args) => cmd_build_graph(args, &cli.out),
        Cmd::Train(args) => cmd_train(args, &cli.config, cli.seed, &cli.out),
        Cmd::Eval(args) => cmd_eval(args, cli.seed, &cli.out),
        Cmd::BenchSvd(args) => cmd_bench_svd(args, cli.seed, &cli.out),
        Cmd::GenSynth(args) => cmd_gen_synth(args, cli.seed, &cli.out),
        Cmd::Project(args) => cmd_project(args, &cli.out),
        Cmd::Gradcheck(args) => cmd_gradcheck(args, &cli.config, cli.seed),
    }
}

fn cmd_prepare(args: PrepareArgs, out: &Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "where to write the packed dataset")?;
    let opts = ParseOptions {
        delimiter: args.delimiter,
        strict: args.strict,
    };
    let log = dataio::parse_log(&args.input, opts)
        .with_context(|| format!("parsing {}", args.input.display()))?;
    let filtered = dataio::five_core_filter(&log, args.min_count)?;
    let dataset = dataio::build_dataset(&filtered, args.max_len)?;
    dataset.save(&out)?;
    println!(
        "{}",
        serde_json::json!({
            "records_parsed": log.records.len(),
            "malformed_skipped": log.malformed,
            "records_kept": filtered.records.len(),
            "num_users": dataset.num_users(),
            "num_items": dataset.num_items(),
            "max_len": dataset.max_len(),
            "out": out,
        })
    );
    Ok(())
}

fn cmd_build_graph(args: BuildGraphArgs, out: &Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "where to write the graph container")?;
    let dataset = load_dataset(&args.dataset)?;
    let cfg = GraphBuildConfig {
        window: args.window,
        self_loop_weight: args.self_loop_weight,
    };
    if cfg.window == 0 {
        bail!("--window must be at least 1");
    }
    let graph = build_graph(&dataset, cfg);
    graph.to_container().write_to(&out)?;
    println!(
        "{}",
        serde_json::json!({
            "nodes": graph.n,
            "nnz": graph.nnz(),
            "window": cfg.window,
            "out": out,
        })
    );
    Ok(())
}

fn cmd_train(
    args: TrainArgs,
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let out = require_out(out, "where to write the model checkpoint")?;
    let dataset = load_dataset(&args.dataset)?;
    let graph = Arc::new(load_graph(&args.graph)?);
    let cfg = resolve_train_config(config, &args.sets, seed, &dataset)?;
    let (model, summary) = fit(&dataset, &graph, cfg)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| out.with_extension("log.jsonl"));
    let mut log_file = create_out(&log_path)?;
    for line in &summary.log_lines {
        writeln!(log_file, "{line}")?;
    }
    log_file.flush()?;
    model.to_container().write_to(&out)?;
    println!(
        "{}",
        serde_json::json!({
            "epochs_run": summary.epochs_run,
            "best_epoch": summary.best_epoch,
            "best_valid_ndcg20": summary.best_valid_ndcg20,
            "checkpoint": out,
            "log": log_path,
        })
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, seed: Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let model = load_model(&args.model)?;
    let graph = match &args.graph {
        Some(p) => Some(load_graph(p)?),
        None => None,
    };
    let report = evaluate(
        &model,
        &dataset,
        graph.as_ref(),
        args.split,
        !args.no_exclude_seen,
    )?;
    let json = report.to_json(seed.unwrap_or(model.cfg.seed));
    if let Some(path) = out {
        let mut f = create_out(path)?;
        writeln!(f, "{json}")?;
        f.flush()?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_bench_svd(args: BenchSvdArgs, seed: Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    let cfg = BenchConfig {
        sizes: args.sizes,
        d: args.d,
        d_prime: args.d_prime,
        nnz_per_row: args.nnz_per_row,
        reps: args.reps,
        layers: args.layers,
        alpha: args.alpha,
        seed: seed.unwrap_or(42),
        ..BenchConfig::default()
    };
    let report = bench_svd(&cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = out {
        let mut f = create_out(path)?;
        writeln!(f, "{json}")?;
        f.flush()?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs, seed: Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "where to write the synthetic interaction log")?;
    let cfg = SynthConfig {
        num_items: args.num_items,
        num_clusters: args.num_clusters,
        num_users: args.num_users,
        seq_len_range: (args.min_len, args.max_len),
        cross_cluster_prob: args.cross_cluster_prob,
        user_globality_mix: args.globality_mix,
        seed: seed.unwrap_or(42),
    };
    let log = gen_synthetic(&cfg)?;
    let mut f = create_out(&out)?;
    for rec in &log.records {
        writeln!(f, "{}\t{}\t{}", rec.user, rec.item, rec.timestamp)?;
    }
    f.flush()?;
    println!(
        "{}",
        serde_json::json!({
            "records": log.records.len(),
            "num_users": cfg.num_users,
            "num_items": cfg.num_items,
            "num_clusters": cfg.num_clusters,
            "out": out,
        })
    );
    Ok(())
}

fn cmd_project(args: ProjectArgs, out: &Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "where to write the CSV")?;
    let model = load_model(&args.model)?;
    let mut f = create_out(&out)?;
    let export = export_projection(&model, &mut f)?;
    f.flush()?;
    println!(
        "{}",
        serde_json::json!({
            "rows": export.rows,
            "spectrum": export.spectrum,
            "converged": export.converged,
            "out": out,
        })
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs, config: &Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let graph = Arc::new(load_graph(&args.graph)?);
    let mut cfg = resolve_train_config(config, &args.sets, seed, &dataset)?;
    // Dropout is stochastic; the check compares deterministic passes.
    cfg.dropout = 0.0;
    let mut model = Model::from_dataset(cfg.clone(), &dataset)?;
    if args.batch_users == 0 {
        bail!("--batch-users must be positive");
    }
    let users: Vec<u32> = dataset.users().take(args.batch_users).collect();
    let batch = prepare_batch(&dataset, &users, &cfg, 0)?;
    let errors = gradient_check(&mut model, &graph, &batch, args.h)?;
    let worst = errors
        .iter()
        .cloned()
        .fold(("".to_string(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc });
    let per_param: Vec<serde_json::Value> = errors
        .iter()
        .map(|(name, err)| serde_json::json!({"param": name, "max_rel_err": err}))
        .collect();
    println!(
        "{}",
        serde_json::json!({
            "params_checked": errors.len(),
            "worst_param": worst.0,
            "worst_rel_err": worst.1,
            "tol": args.tol,
            "per_param": per_param,
        })
    );
    if worst.1 > args.tol {
        bail!(
            "gradient check failed: {} has relative error {:.3e} > {:.3e}",
            worst.0,
            worst.1,
            args.tol
        );
    }
    Ok(())
}
