//! Command-line entry points: gen-synthetic, build, train, report.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error. All
//! randomness flows from the --seed / --seeds flags through named streams;
//! rerunning a command with identical inputs rewrites byte-identical
//! reports and checkpoints (the run manifest is only written when its
//! stable id changes).

use crate::checksum::fnv1a_hex;
use crate::corpus::benchmark::{read_json, write_json};
use crate::corpus::{
    build_benchmark, gen_synthetic_corpus, load_corpus, save_corpus, Benchmark, BuildParams,
    GenParams,
};
use crate::error::{Error, Result};
use crate::eval::{render_table, RunReport};
use crate::par;
use crate::trainer::{run_stream, RunMode, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "hanet",
    version,
    about = "Continual few-shot event detection runs"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trigger-classification corpus
    GenSynthetic(GenSyntheticArgs),
    /// Build an m-way k-shot continual benchmark from a corpus file
    Build(BuildArgs),
    /// Train and evaluate one or more seeded runs
    Train(TrainArgs),
    /// Merge run reports into one comparison table
    Report(ReportArgs),
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// Number of event types
    #[arg(long)]
    types: usize,
    /// Instances generated per type
    #[arg(long)]
    per_type: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    sentence_len: usize,
    /// Probability that the trigger token comes from its own type's lexicon
    #[arg(long, default_value_t = 0.9)]
    signal: f64,
    #[arg(long, default_value = "corpus.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    tasks: usize,
    #[arg(long)]
    way: usize,
    #[arg(long)]
    base_shots: usize,
    /// k training candidates per type in incremental tasks
    #[arg(long)]
    shots: usize,
    #[arg(long)]
    seed: u64,
    /// NA candidates per selected sentence
    #[arg(long, default_value_t = 1)]
    na_ratio: usize,
    #[arg(long, default_value_t = 10)]
    dev_per_type: usize,
    #[arg(long, default_value_t = 20)]
    test_per_type: usize,
    #[arg(long, default_value = "benchmark")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Benchmark directory produced by `build`
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long, default_value = "hanet")]
    mode: String,
    /// JSON config mirroring the training configuration; defaults apply to
    /// missing fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list, e.g. 1,2,3,4,5
    #[arg(long, default_value = "1")]
    seeds: String,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json files produced by `train`
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Optional path for the rendered table
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    manifest_id: String,
    config_checksum: String,
    benchmark_checksum: String,
    seeds: Vec<u64>,
    mode: String,
    code_version: String,
    created_unix_seconds: u64,
}

/// Parse argv and execute; the process exit code follows the documented
/// convention (clap reports usage errors with status 2 on its own).
pub fn run() -> std::process::ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            std::process::ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
        Command::Build(args) => cmd_build(args),
        Command::Train(args) => cmd_train(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_gen_synthetic(args: GenSyntheticArgs) -> Result<()> {
    let params = GenParams {
        n_types: args.types,
        instances_per_type: args.per_type,
        vocab_size: args.vocab_size,
        sentence_len: args.sentence_len,
        signal_strength: args.signal,
    };
    let corpus = gen_synthetic_corpus(&params, args.seed)?;
    save_corpus(&args.out, &corpus)?;
    let bytes = std::fs::read(&args.out)?;
    println!(
        "wrote {} instances to {} (checksum {})",
        corpus.len(),
        args.out.display(),
        fnv1a_hex(&bytes)
    );
    Ok(())
}

fn cmd_build(args: BuildArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let params = BuildParams {
        n_tasks: args.tasks,
        way: args.way,
        base_shots: args.base_shots,
        shots: args.shots,
        na_ratio: args.na_ratio,
        dev_per_type: args.dev_per_type,
        test_per_type: args.test_per_type,
        seed: args.seed,
    };
    let bench = build_benchmark(&corpus, &params)?;
    bench.save_dir(&args.out)?;
    println!(
        "built {}-task {}-way benchmark at {} (checksum {})",
        params.n_tasks,
        params.way,
        args.out.display(),
        bench.checksum()
    );
    Ok(())
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        seeds.push(part.parse::<u64>().map_err(|_| {
            Error::InvalidArgument(format!("seed `{part}` is not an unsigned integer"))
        })?);
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".to_string()));
    }
    Ok(seeds)
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg: TrainConfig = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mode: RunMode = args.mode.parse()?;
    let bench = Benchmark::load_dir(&args.benchmark)?;
    let base_cfg = load_config(args.config.as_deref())?;
    let seeds = parse_seeds(&args.seeds)?;
    std::fs::create_dir_all(&args.out)?;

    let manifest_id = fnv1a_hex(
        format!(
            "{}|{}|{}|{:?}",
            base_cfg.checksum(),
            bench.checksum(),
            mode.as_str(),
            seeds
        )
        .as_bytes(),
    );
    write_manifest_once(
        &args.out.join("manifest.json"),
        &manifest_id,
        &base_cfg,
        &bench,
        &seeds,
        mode,
    )?;

    // Seed fan-out: independent runs, collected in seed order.
    let outcomes: Vec<Result<RunReport>> = par::map_slice(&seeds, |&seed| {
        let mut cfg = base_cfg.clone();
        cfg.seed = seed;
        let run_dir = args.out.join(format!("seed_{seed}"));
        let ckpt_dir = run_dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir)?;
        let outcome = run_stream(&bench, &cfg, mode, Some(&ckpt_dir), &manifest_id)?;
        write_json(&run_dir.join("report.json"), &outcome.report)?;
        let row = outcome.report.table_row();
        std::fs::write(
            run_dir.join("report.txt"),
            render_table(std::slice::from_ref(&row)),
        )?;
        Ok(outcome.report)
    });
    let reports: Vec<RunReport> = outcomes.into_iter().collect::<Result<_>>()?;

    let aggregate = aggregate_table(&reports);
    std::fs::write(args.out.join("aggregate.txt"), &aggregate)?;
    write_json(&args.out.join("aggregate.json"), &reports)?;
    print!("{aggregate}");
    Ok(())
}

fn write_manifest_once(
    path: &Path,
    manifest_id: &str,
    cfg: &TrainConfig,
    bench: &Benchmark,
    seeds: &[u64],
    mode: RunMode,
) -> Result<()> {
    if path.exists() {
        let existing: RunManifest = read_json(path)?;
        if existing.manifest_id == manifest_id {
            return Ok(());
        }
    }
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        path,
        &RunManifest {
            manifest_id: manifest_id.to_string(),
            config_checksum: cfg.checksum(),
            benchmark_checksum: bench.checksum(),
            seeds: seeds.to_vec(),
            mode: mode.as_str().to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix_seconds: created,
        },
    )
}

/// Per-stage mean and std across seeds, one row per stage column plus the
/// overall mean.
fn aggregate_table(reports: &[RunReport]) -> String {
    let n_stages = reports.iter().map(|r| r.stages.len()).max().unwrap_or(0);
    let mut out = String::new();
    let mode = reports.first().map(|r| r.mode.as_str()).unwrap_or("?");
    out.push_str(&format!(
        "{} over {} seed(s): mean +/- std, percent\n",
        mode,
        reports.len()
    ));
    out.push_str(&format!("{:<8}", "stage"));
    for t in 1..=n_stages {
        out.push_str(&format!(" {t:>14}"));
    }
    out.push_str(&format!(" {:>14}\n", "overall"));
    out.push_str(&format!("{:<8}", mode));
    for t in 0..n_stages {
        let vals: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.stages.get(t))
            .map(|s| s.micro_f1 * 100.0)
            .collect();
        out.push_str(&format!(" {:>14}", mean_std(&vals)));
    }
    let overall: Vec<f64> = reports.iter().map(|r| r.overall * 100.0).collect();
    out.push_str(&format!(" {:>14}\n", mean_std(&overall)));
    out
}

fn mean_std(vals: &[f64]) -> String {
    if vals.is_empty() {
        return "-".to_string();
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    format!("{mean:.2}+/-{:.2}", var.sqrt())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut reports: Vec<RunReport> = Vec::new();
    for path in &args.reports {
        reports.push(read_json(path)?);
    }
    let first_checksum = reports[0].benchmark_checksum.clone();
    for r in &reports {
        if r.benchmark_checksum != first_checksum {
            return Err(Error::InvalidArgument(format!(
                "benchmark checksum mismatch: {} vs {}",
                first_checksum, r.benchmark_checksum
            )));
        }
    }
    // Group by mode, aggregate mean per stage.
    let mut by_mode: std::collections::BTreeMap<&str, Vec<&RunReport>> =
        std::collections::BTreeMap::new();
    for r in &reports {
        by_mode.entry(r.mode.as_str()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (mode, group) in by_mode {
        let n_stages = group.iter().map(|r| r.stages.len()).max().unwrap_or(0);
        let stage_means: Vec<f64> = (0..n_stages)
            .map(|t| {
                let vals: Vec<f64> = group
                    .iter()
                    .filter_map(|r| r.stages.get(t))
                    .map(|s| s.micro_f1)
                    .collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            })
            .collect();
        let overall = group.iter().map(|r| r.overall).sum::<f64>() / group.len() as f64;
        rows.push((mode.to_string(), stage_means, overall));
    }
    let table = render_table(&rows);
    match &args.out {
        Some(path) => std::fs::write(path, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}
