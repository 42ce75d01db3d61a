//! Experiment orchestration behind the `generate`, `simulate` and `compare`
//! commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::engine::{run, EngineError, EventLog, NullObserver, RunObserver, RunOutput};
use crate::metrics::{compare, summarize, write_comparison_csv, write_reports_csv, ComparisonRow, MetricsError, RunMeta, RunReport};
use crate::workload::{generate_trace, load_trace, trace_to_jsonl, TraceRecord, WorkloadError};

pub const THREADS_ENV: &str = "SMSE_SIM_THREADS";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("{policy} at level {level}, seed {seed}: {source}")]
    Engine {
        policy: String,
        level: usize,
        seed: u64,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Usage and configuration problems, as opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_) | ExperimentError::Usage(_) | ExperimentError::Workload(WorkloadError::Config(_))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Everything one simulation produced.
pub struct RunArtifacts {
    pub output: RunOutput,
    pub report: RunReport,
    pub event_log: Option<String>,
}

pub fn simulate_trace(
    cfg: &ExperimentConfig,
    trace: &[TraceRecord],
    policy_name: &str,
    level: usize,
    seed: u64,
    with_event_log: bool,
) -> Result<RunArtifacts, ExperimentError> {
    let repo = cfg.repository()?;
    let policy = cfg.policy(policy_name, &repo)?;
    let engine = cfg.engine_for(seed);
    let estimator = cfg.estimator_matrix(&repo);
    let mut log = EventLog::default();
    let mut null = NullObserver;
    let observer: &mut dyn RunObserver = if with_event_log { &mut log } else { &mut null };
    let output = run(trace, &engine, &repo, &policy, estimator, observer).map_err(|source| ExperimentError::Engine {
        policy: policy_name.to_owned(),
        level,
        seed,
        source,
    })?;
    let meta = RunMeta {
        policy: policy_name.to_owned(),
        level,
        seed,
        config_digest: cfg.digest(),
    };
    let report = summarize(&output, trace, &meta)?;
    Ok(RunArtifacts {
        output,
        report,
        event_log: with_event_log.then_some(log.lines),
    })
}

/// Generates the configured workload and writes it as JSON Lines.
pub fn cmd_generate(cfg: &ExperimentConfig, out_path: &Path) -> Result<usize, ExperimentError> {
    let repo = cfg.repository()?;
    let trace = generate_trace(&cfg.workload, &repo.ids())?;
    write_atomic(out_path, trace_to_jsonl(&trace).as_bytes())?;
    Ok(trace.len())
}

pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    trace_path: &Path,
    policy: &str,
    out_dir: &Path,
    seed: u64,
    with_event_log: bool,
) -> Result<RunReport, ExperimentError> {
    let repo = cfg.repository()?;
    cfg.policy(policy, &repo)?;
    let trace = load_trace(trace_path)?;
    let a = simulate_trace(cfg, &trace, policy, trace.len(), seed, with_event_log)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut csv = Vec::new();
    write_reports_csv(&mut csv, std::slice::from_ref(&a.report))?;
    write_atomic(&out_dir.join("report.csv"), &csv)?;
    write_atomic(&out_dir.join("plan_log.jsonl"), a.output.plan_log_jsonl().as_bytes())?;
    if let Some(log) = &a.event_log {
        write_atomic(&out_dir.join("events.jsonl"), log.as_bytes())?;
    }
    Ok(a.report)
}

fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|n| *n > 0)
}

struct Cell {
    level: usize,
    seed: u64,
    trace: Vec<TraceRecord>,
}

/// Results of a full comparison, in (level, seed, policy) order.
pub struct Comparison {
    pub reports: Vec<RunReport>,
    pub rows: Vec<ComparisonRow>,
    pub plan_logs: Vec<(usize, u64, String, String)>,
    pub traces: Vec<(usize, u64, String)>,
}

/// Runs every configured policy on identical traces for each (level, seed).
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<Comparison, ExperimentError> {
    if cfg.policies.len() < 2 {
        return Err(ExperimentError::Usage(format!(
            "compare needs at least two policies, config lists {}",
            cfg.policies.len()
        )));
    }
    let repo = cfg.repository()?;
    let ids = repo.ids();
    let mut cells = Vec::new();
    for &level in &cfg.levels {
        for &seed in &cfg.seeds {
            let trace = generate_trace(&cfg.workload_for(level, seed), &ids)?;
            cells.push(Cell { level, seed, trace });
        }
    }
    let jobs: Vec<(usize, &str)> =
        (0..cells.len()).flat_map(|c| cfg.policies.iter().map(move |p| (c, p.as_str()))).collect();
    let work = || -> Vec<Result<RunArtifacts, ExperimentError>> {
        jobs.par_iter()
            .map(|(c, p)| simulate_trace(cfg, &cells[*c].trace, p, cells[*c].level, cells[*c].seed, false))
            .collect()
    };
    let results = match thread_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ExperimentError::Usage(format!("{THREADS_ENV}: {e}")))?
            .install(work),
        None => work(),
    };
    let mut reports = Vec::with_capacity(results.len());
    let mut plan_logs = Vec::with_capacity(results.len());
    for r in results {
        let a = r?;
        plan_logs.push((a.report.level, a.report.seed, a.report.policy.clone(), a.output.plan_log_jsonl()));
        reports.push(a.report);
    }
    let rows = compare(&reports)?;
    let traces = cells.iter().map(|c| (c.level, c.seed, trace_to_jsonl(&c.trace))).collect();
    Ok(Comparison {
        reports,
        rows,
        plan_logs,
        traces,
    })
}

/// Runs the comparison and writes traces, plan logs, `reports.csv` and
/// `comparison.csv` under `out_dir`. Outputs are staged in
/// `out_dir/.incomplete` and moved into place only once everything
/// succeeded; the staging directory is removed on failure.
pub fn cmd_compare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<ComparisonRow>, ExperimentError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let staging = out_dir.join(".incomplete");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    let result = stage_comparison(cfg, &staging);
    match result {
        Ok(rows) => {
            for entry in fs::read_dir(&staging).map_err(io_err(&staging))? {
                let entry = entry.map_err(io_err(&staging))?;
                let dest = out_dir.join(entry.file_name());
                if dest.is_dir() {
                    fs::remove_dir_all(&dest).map_err(io_err(&dest))?;
                }
                fs::rename(entry.path(), &dest).map_err(io_err(&dest))?;
            }
            fs::remove_dir(&staging).map_err(io_err(&staging))?;
            Ok(rows)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn stage_comparison(cfg: &ExperimentConfig, staging: &Path) -> Result<Vec<ComparisonRow>, ExperimentError> {
    let cmp = run_comparison(cfg)?;
    let traces = staging.join("traces");
    let plans = staging.join("plan_logs");
    fs::create_dir_all(&traces).map_err(io_err(&traces))?;
    fs::create_dir_all(&plans).map_err(io_err(&plans))?;
    for (level, seed, text) in &cmp.traces {
        let p = traces.join(format!("level{level}_seed{seed}.jsonl"));
        fs::write(&p, text).map_err(io_err(&p))?;
    }
    for (level, seed, policy, text) in &cmp.plan_logs {
        let p = plans.join(format!("{policy}_level{level}_seed{seed}.jsonl"));
        fs::write(&p, text).map_err(io_err(&p))?;
    }
    let mut csv = Vec::new();
    write_reports_csv(&mut csv, &cmp.reports)?;
    let p = staging.join("reports.csv");
    fs::write(&p, csv).map_err(io_err(&p))?;
    let mut csv = Vec::new();
    write_comparison_csv(&mut csv, &cmp.rows)?;
    let p = staging.join("comparison.csv");
    fs::write(&p, csv).map_err(io_err(&p))?;
    Ok(cmp.rows)
}
