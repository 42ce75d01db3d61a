use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use smse_core::config::ExperimentConfig;
use smse_core::experiment::{cmd_compare, cmd_generate, cmd_simulate, ExperimentError};
use smse_core::provisioner::AllocationLoop;

/// Serverless media-streaming engine simulator.
#[derive(Parser)]
#[command(name = "smse-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed (workload seed for `generate`, run seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic JSON Lines trace.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output trace file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one policy over a trace.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        /// dynamic, static or ephemeral.
        #[arg(long)]
        policy: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Use the greedy allocation loop without the per-candidate fit check.
        #[arg(long)]
        strict_paper_loop: bool,
        /// Also write events.jsonl.
        #[arg(long)]
        event_log: bool,
    },
    /// Run every configured policy over every level and seed.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strict_paper_loop: bool,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn load(common: &Common, strict: bool) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)
            .with_context(|| format!("loading config {}", p.display()))
            .map_err(Failure::Usage)?,
        None => ExperimentConfig::default(),
    };
    if strict {
        cfg.engine.allocation_loop = AllocationLoop::StrictPaperLoop;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { common, out } => {
            let mut cfg = load(&common, false)?;
            if let Some(s) = common.seed {
                cfg.workload.rng_seed = s;
            }
            let n = cmd_generate(&cfg, &out)?;
            println!("{n} records written to {}", out.display());
        }
        Command::Simulate {
            common,
            trace,
            policy,
            out,
            strict_paper_loop,
            event_log,
        } => {
            let cfg = load(&common, strict_paper_loop)?;
            let r = cmd_simulate(&cfg, &trace, &policy, &out, common.seed.unwrap_or(0), event_log)?;
            println!(
                "{}: {} tasks, makespan {:.3} s, miss rate {:.4}",
                r.policy, r.task_count, r.makespan_s, r.deadline_miss_rate
            );
        }
        Command::Compare {
            common,
            out,
            strict_paper_loop,
        } => {
            let mut cfg = load(&common, strict_paper_loop)?;
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            let rows = cmd_compare(&cfg, &out)?;
            for r in rows {
                let ci = r.makespan_ci95_s.map_or_else(|| "n/a".to_owned(), |c| format!("±{c:.3}"));
                println!("{:>6} {:<9} makespan {:.3} s {ci}", r.level, r.policy, r.makespan_mean_s);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
