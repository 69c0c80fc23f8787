//! Command-line front door: `train` runs the agent and writes metrics and
//! checkpoints, `summarize` turns metrics files into a comparison table,
//! `verify` runs the oracle/property suites and prints a machine-readable
//! report.
//!
//! Exit codes: 0 ok, 1 usage/configuration error, 2 runtime failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::runtime::{self, MetricRecord, Trainer};
use crate::verify;

#[derive(Parser)]
#[command(name = "mixq", version, about = "recurrent multi-mixture Q-learning agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics, a summary and checkpoints.
    Train(TrainArgs),
    /// Summarize one or more metrics files into a table.
    Summarize(SummarizeArgs),
    /// Run the verification suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment name (`env.name`).
    #[arg(long)]
    env: Option<String>,
    /// Environment size (`env.size`).
    #[arg(long)]
    size: Option<usize>,
    /// Reward scale (`env.scale`).
    #[arg(long)]
    scale: Option<f64>,
    /// Frame budget (`run.frames`).
    #[arg(long)]
    frames: Option<u64>,
    /// Master seed (`run.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Return estimator (`returns.estimator`).
    #[arg(long)]
    estimator: Option<String>,
    /// Output directory; defaults to `run.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Arbitrary config overrides, repeatable: `--set loss.eta=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Metrics files (line-delimited records from `train`).
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Return threshold for the frames-to-threshold column.
    #[arg(long)]
    threshold: Option<f64>,
    /// Emit the table as JSON lines instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run a single suite by name; all suites when omitted.
    #[arg(long)]
    suite: Option<String>,
}

/// Parses argv and dispatches; returns the process exit code.
pub fn run() -> i32 {
    run_with_args(std::env::args_os())
}

pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/version output on "errors"
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 1 };
        }
    };
    match cli.command {
        Command::Train(args) => train(args),
        Command::Summarize(args) => summarize(args),
        Command::Verify(args) => run_verify(args),
    }
}

fn build_config(args: &TrainArgs) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| e.to_string())?;
    }
    cfg.apply_env_overrides().map_err(|e| e.to_string())?;
    // flags win over file and environment
    if let Some(v) = &args.env {
        cfg.set("env.name", v).map_err(|e| e.to_string())?;
    }
    if let Some(v) = args.size {
        cfg.set("env.size", &v.to_string()).map_err(|e| e.to_string())?;
    }
    if let Some(v) = args.scale {
        cfg.set("env.scale", &v.to_string()).map_err(|e| e.to_string())?;
    }
    if let Some(v) = args.frames {
        cfg.set("run.frames", &v.to_string()).map_err(|e| e.to_string())?;
    }
    if let Some(v) = args.seed {
        cfg.set("run.seed", &v.to_string()).map_err(|e| e.to_string())?;
    }
    if let Some(v) = &args.estimator {
        cfg.set("returns.estimator", v).map_err(|e| e.to_string())?;
    }
    for kv in &args.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| e.to_string())?;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> i32 {
    let cfg = match build_config(&args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("error: cannot create {}: {e}", out_dir.display());
        return 2;
    }
    // record the resolved configuration next to the metrics
    if let Err(e) = std::fs::write(out_dir.join("config.cfg"), cfg.serialize()) {
        eprintln!("error: {e}");
        return 2;
    }
    let mut trainer = match Trainer::new(cfg) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    trainer.checkpoint_dir = Some(out_dir.clone());
    let metrics = match trainer.run() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let metrics_path = out_dir.join("metrics.ndjson");
    if let Err(e) = std::fs::write(&metrics_path, metrics.to_ndjson()) {
        eprintln!("error: {e}");
        return 2;
    }
    println!(
        "{}",
        serde_json::to_string(&metrics.summary).expect("serializable summary")
    );
    0
}

/// Per-run aggregates extracted from one metrics file.
#[derive(Debug, serde::Serialize)]
pub struct RunDigest {
    pub file: String,
    pub env: String,
    pub seed: u64,
    pub frames: u64,
    pub auc: Option<f64>,
    /// AUC divided by the best AUC among runs of the same environment.
    pub normalized_auc: Option<f64>,
    pub frames_to_threshold: Option<u64>,
    pub mean_return: Option<f64>,
    pub median_return: Option<f64>,
    pub best_return: Option<f64>,
}

/// Pure summarization of metric records grouped per file.
pub fn digest_runs(
    inputs: &[(String, Vec<MetricRecord>)],
    threshold: Option<f64>,
) -> Vec<RunDigest> {
    let mut digests: Vec<RunDigest> = inputs
        .iter()
        .map(|(file, records)| {
            let env = records
                .iter()
                .find(|r| r.role == "config")
                .and_then(|r| r.env.clone())
                .unwrap_or_else(|| "unknown".into());
            let seed = records
                .iter()
                .find(|r| r.role == "config")
                .and_then(|r| r.seed)
                .unwrap_or(0);
            let budget = records
                .iter()
                .find(|r| r.role == "config")
                .and_then(|r| r.frames_budget)
                .unwrap_or(0);
            let mut curve: Vec<(u64, f64)> = records
                .iter()
                .filter(|r| r.role == "evaluator")
                .filter_map(|r| r.episode_return.map(|x| (r.frames, x)))
                .collect();
            curve.sort_by_key(|p| p.0);
            let frames = records
                .iter()
                .filter(|r| r.role == "summary")
                .map(|r| r.frames)
                .next_back()
                .unwrap_or(budget);
            let auc = runtime::trapezoid_auc(&curve, frames.max(1));
            let mut returns: Vec<f64> = curve.iter().map(|p| p.1).collect();
            returns.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = if returns.is_empty() {
                None
            } else {
                Some(returns.iter().sum::<f64>() / returns.len() as f64)
            };
            let median = if returns.is_empty() {
                None
            } else {
                Some(returns[returns.len() / 2])
            };
            let best = returns.last().copied();
            let frames_to_threshold = match threshold {
                Some(th) => curve.iter().find(|p| p.1 >= th).map(|p| p.0),
                None => records
                    .iter()
                    .filter(|r| r.role == "summary")
                    .find_map(|r| r.frames_to_threshold),
            };
            RunDigest {
                file: file.clone(),
                env,
                seed,
                frames,
                auc,
                normalized_auc: None,
                frames_to_threshold,
                mean_return: mean,
                median_return: median,
                best_return: best,
            }
        })
        .collect();

    // max-normalize AUC within each environment
    let mut best_per_env: BTreeMap<String, f64> = BTreeMap::new();
    for d in &digests {
        if let Some(a) = d.auc {
            let e = best_per_env.entry(d.env.clone()).or_insert(f64::NEG_INFINITY);
            *e = e.max(a);
        }
    }
    for d in digests.iter_mut() {
        if let (Some(a), Some(&best)) = (d.auc, best_per_env.get(&d.env)) {
            if best != 0.0 {
                d.normalized_auc = Some(a / best);
            }
        }
    }
    digests
}

fn summarize(args: SummarizeArgs) -> i32 {
    let mut inputs = Vec::new();
    for path in &args.files {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return 2;
            }
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<MetricRecord>(line) {
                Ok(r) => records.push(r),
                Err(e) => {
                    eprintln!("error: {}:{}: {e}", path.display(), i + 1);
                    return 2;
                }
            }
        }
        inputs.push((path.display().to_string(), records));
    }
    let digests = digest_runs(&inputs, args.threshold);
    let mut out = std::io::stdout().lock();
    if args.json {
        for d in &digests {
            let _ = writeln!(out, "{}", serde_json::to_string(d).expect("serializable"));
        }
    } else {
        let _ = writeln!(
            out,
            "{:<28} {:<12} {:>4} {:>10} {:>12} {:>8} {:>12} {:>10} {:>10}",
            "file", "env", "seed", "frames", "auc", "norm", "to_thresh", "mean", "best"
        );
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for d in &digests {
            let _ = writeln!(
                out,
                "{:<28} {:<12} {:>4} {:>10} {:>12} {:>8} {:>12} {:>10} {:>10}",
                d.file.chars().rev().take(28).collect::<String>().chars().rev().collect::<String>(),
                d.env,
                d.seed,
                d.frames,
                fmt_opt(d.auc),
                fmt_opt(d.normalized_auc),
                d.frames_to_threshold
                    .map_or("-".to_string(), |f| f.to_string()),
                fmt_opt(d.mean_return),
                fmt_opt(d.best_return),
            );
        }
    }
    0
}

fn run_verify(args: VerifyArgs) -> i32 {
    let results = match &args.suite {
        Some(name) => match verify::run_suite(name) {
            Some(r) => vec![r],
            None => {
                eprintln!(
                    "error: unknown suite `{name}`; known: {}",
                    verify::suite_names().join(", ")
                );
                return 1;
            }
        },
        None => verify::run_all(),
    };
    let mut all_pass = true;
    for r in &results {
        println!("{}", serde_json::to_string(r).expect("serializable"));
        all_pass &= r.pass;
    }
    if all_pass {
        0
    } else {
        2
    }
}
