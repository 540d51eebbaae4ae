//! Command-line front end for the pruning and eviction experiments.
//!
//! Every subcommand reads one JSON experiment config (defaults apply when
//! `--config` is omitted), writes its artifacts into the output directory and
//! prints a JSON summary line. Failures print a JSON error record on stderr
//! and exit with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use asymtok::budget::{calibrate_linear, calibrate_threshold, BudgetPolicy, CalibrationSet};
use asymtok::harness::{
    emit_report, emit_rows, gap_stats, read_report, resolve_out_dir, run_eviction_eval, run_pruning_eval, summarize,
    write_rows, ExperimentConfig, Format,
};
use asymtok::scorer::{corpus_fingerprint, train_scorer, ScorerState};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "asymtok", version, about = "Asymmetric vision/text token compression experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (falls back to the config, then $ASYMTOK_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true, env = "ASYMTOK_JOBS")]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Json => Format::Json,
            OutFormat::Csv => Format::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the per-dimension scorer weights on the training corpus.
    TrainScorer,
    /// Fit both gap-adaptive budget policies to the calibration target.
    Calibrate,
    /// Prune held-out samples with every configured scorer and ratio.
    EvalPrune,
    /// Decode scripted conversations under each eviction policy.
    EvalEvict,
    /// Importance-gap statistics of the training corpus.
    GapStats,
    /// Aggregate one or more record reports.
    Report {
        /// Report files written by eval-prune or eval-evict.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Print the effective config as JSON.
    Config,
}

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
    format: Format,
}

impl Ctx {
    fn path(&self, stem: &str) -> PathBuf {
        self.out.join(format!("{stem}.{}", self.format.extension()))
    }
}

fn load_config(global: &Global) -> Result<ExperimentConfig> {
    let mut config = match &global.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let config = load_config(&cli.global)?;
    let out = resolve_out_dir(cli.global.out.as_deref(), config.output.as_deref());
    let ctx = Ctx { config, out, format: cli.global.format.into() };
    if matches!(cli.command, Command::Config) {
        return Ok(serde_json::to_value(&ctx.config)?);
    }
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.global.jobs.unwrap_or(0)).build()?;
    pool.install(|| match cli.command {
        Command::TrainScorer => train(&ctx),
        Command::Calibrate => calibrate(&ctx),
        Command::EvalPrune => eval_prune(&ctx),
        Command::EvalEvict => eval_evict(&ctx),
        Command::GapStats => gaps(&ctx),
        Command::Report { inputs } => report(&ctx, &inputs),
        Command::Config => unreachable!(),
    })
}

fn written(paths: &[&Path]) -> serde_json::Value {
    json!(paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())
}

fn train(ctx: &Ctx) -> Result<serde_json::Value> {
    let model = ctx.config.build_model()?;
    let corpus = ctx.config.training_corpus(&model)?;
    let mut state = ScorerState::new(model.config().hidden_dim, ctx.config.seeded_hyper());
    state.corpus_fingerprint = Some(corpus_fingerprint(&corpus));
    state.model_checksum = Some(model.checksum());
    let state = train_scorer(&model, &corpus, state)?;
    let path = ctx.out.join("scorer.json");
    state.save(&path)?;
    Ok(json!({ "command": "train-scorer", "loss_log": state.loss_log, "written": written(&[&path]) }))
}

#[derive(Serialize)]
struct CalibrationRow {
    policy: &'static str,
    avg_keep_ratio: f64,
    mean_mse: f64,
    params: String,
}

fn calibrate(ctx: &Ctx) -> Result<serde_json::Value> {
    let model = ctx.config.build_model()?;
    let scorer = ctx.config.scorers[0].load()?;
    let corpus = ctx.config.training_corpus(&model)?;
    let samples = corpus
        .into_iter()
        .map(|s| {
            let scores = scorer.score(&model, &s)?;
            Ok((s, scores))
        })
        .collect::<asymtok::Result<Vec<_>>>()?;
    let set = CalibrationSet::build(&model, &samples)?;
    let target = ctx.config.calibration_target;
    let (r_min, r_max) = ctx.config.linear_range;
    let threshold = calibrate_threshold(&set, target)?;
    let linear = calibrate_linear(&set, target, r_min, r_max)?;
    let policies = [BudgetPolicy::Threshold(threshold.policy), BudgetPolicy::Linear(linear.policy)];
    let mut rows = Vec::new();
    for p in &policies {
        let (avg, mse) = set.evaluate(p);
        rows.push(CalibrationRow { policy: p.name(), avg_keep_ratio: avg, mean_mse: mse, params: serde_json::to_string(p)? });
        let uniform = BudgetPolicy::Uniform { ratio: avg };
        let (u_avg, u_mse) = set.evaluate(&uniform);
        rows.push(CalibrationRow {
            policy: "uniform",
            avg_keep_ratio: u_avg,
            mean_mse: u_mse,
            params: serde_json::to_string(&uniform)?,
        });
    }
    let policy_path = ctx.out.join("calibrated_policies.json");
    std::fs::write(
        &policy_path,
        serde_json::to_string_pretty(&json!({
            "target": target,
            "scorer": scorer.name(),
            "threshold": threshold,
            "linear": linear,
        }))? + "\n",
    )?;
    let table = ctx.path("calibration");
    emit_rows(&rows, "calibration", &table, ctx.format)?;
    Ok(json!({ "command": "calibrate", "written": written(&[&policy_path, &table]) }))
}

fn eval_prune(ctx: &Ctx) -> Result<serde_json::Value> {
    let records = run_pruning_eval(&ctx.config)?;
    let path = ctx.path("prune");
    emit_report(&records, &path, ctx.format)?;
    Ok(json!({ "command": "eval-prune", "records": records.len(), "written": written(&[&path]) }))
}

fn eval_evict(ctx: &Ctx) -> Result<serde_json::Value> {
    let run = run_eviction_eval(&ctx.config)?;
    let path = ctx.path("evict");
    emit_report(&run.records, &path, ctx.format)?;
    let occupancy = ctx.path("occupancy");
    emit_rows(&run.occupancy, "occupancy", &occupancy, ctx.format)?;
    let log = ctx.out.join("events.jsonl");
    let mut buf = Vec::new();
    for e in &run.events {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    std::fs::write(&log, buf)?;
    Ok(json!({
        "command": "eval-evict",
        "records": run.records.len(),
        "events": run.events.len(),
        "written": written(&[&path, &occupancy, &log]),
    }))
}

fn gaps(ctx: &Ctx) -> Result<serde_json::Value> {
    let model = ctx.config.build_model()?;
    let scorer = ctx.config.scorers[0].load()?;
    let corpus = ctx.config.training_corpus(&model)?;
    let stats = gap_stats(&model, &corpus, &scorer, &ctx.config.histogram)?;
    let path = ctx.path("gap_stats");
    match ctx.format {
        Format::Json => std::fs::write(&path, serde_json::to_string_pretty(&stats)? + "\n")?,
        Format::Csv => {
            let mut buf = Vec::new();
            write_rows(&stats.histogram, "histogram", Format::Csv, &mut buf)?;
            std::fs::write(&path, buf)?;
        }
    }
    Ok(json!({
        "command": "gap-stats",
        "scorer": scorer.name(),
        "count": stats.count,
        "mean": stats.mean,
        "std": stats.std,
        "written": written(&[&path]),
    }))
}

fn report(ctx: &Ctx, inputs: &[PathBuf]) -> Result<serde_json::Value> {
    let mut records = Vec::new();
    for p in inputs {
        records.extend(read_report(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let rows = summarize(&records)?;
    let path = ctx.path("summary");
    emit_rows(&rows, "summary", &path, ctx.format)?;
    Ok(json!({ "command": "report", "groups": rows.len(), "written": written(&[&path]) }))
}

fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let kind = err.chain().find_map(|e| e.downcast_ref::<asymtok::Error>()).map_or("runtime", |e| e.kind());
    let context: Vec<String> = err.chain().map(ToString::to_string).collect();
    json!({ "error": { "kind": kind, "message": err.to_string(), "chain": context } })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::FAILURE
        }
    }
}
