use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sieve_eot::harness::{self, ExperimentConfig};
use sieve_eot::Error;

#[derive(Parser)]
#[command(name = "sieve-eot", version, about = "Sieve estimation of entropic optimal transport values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for replications (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Single end-to-end sieve estimate, printed as JSON.
    Estimate(Common),
    /// Monte Carlo campaign writing results.csv, summary.json and manifest.json.
    Replicate(Common),
    /// Grid oracle EOT value and the exact OT value.
    Oracle(Common),
    /// Partition sizes and the balanced sample size.
    PartitionInfo(Common),
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Estimate(c) => print_json(&harness::estimate(&load(&c)?)?),
        Command::Replicate(c) => {
            let cfg = load(&c)?;
            let out = harness::replicate(&cfg, c.threads, &cfg.output_dir)?;
            print_json(&out.summary)
        }
        Command::Oracle(c) => {
            let cfg = load(&c)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let cache = cfg.output_dir.join("oracle_cache.json");
            print_json(&harness::oracle(&cfg, Some(&cache))?)
        }
        Command::PartitionInfo(c) => print_json(&harness::partition_info(&load(&c)?)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let report = ErrorReport { error: e.kind(), message: e.to_string(), exit_code: code };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(code as u8)
        }
    }
}
