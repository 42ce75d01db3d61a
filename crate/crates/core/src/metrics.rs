//! Run summaries, cross-seed comparison and CSV output.

use std::collections::BTreeMap;
use std::io;

use serde::Serialize;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::domain::{TaskId, TaskState};
use crate::engine::RunOutput;
use crate::workload::{trace_to_jsonl, TraceRecord};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("run incomplete, unfinished tasks: {0:?}")]
    Incomplete(Vec<TaskId>),
    #[error("run completed {completed} tasks for a trace of {expected}")]
    CountMismatch { completed: usize, expected: usize },
    #[error("reports for level {level}, seed {seed} were produced from different traces")]
    TraceMismatch { level: usize, seed: u64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Identifies what a run was.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMeta {
    pub policy: String,
    pub level: usize,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub policy: String,
    pub level: usize,
    pub seed: u64,
    pub config_digest: String,
    pub trace_digest: String,
    pub task_count: usize,
    pub makespan_s: f64,
    pub deadline_miss_count: usize,
    pub deadline_miss_rate: f64,
    pub total_start_overhead_s: f64,
    pub total_init_overhead_s: f64,
    pub mean_turnaround_s: f64,
    pub p50_turnaround_s: f64,
    pub p95_turnaround_s: f64,
    pub max_exec_s: f64,
    pub window_memory_utilization: Vec<f64>,
    pub escalations: usize,
}

pub fn trace_digest(trace: &[TraceRecord]) -> String {
    hex::encode(Sha256::digest(trace_to_jsonl(trace).as_bytes()))
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize(output: &RunOutput, trace: &[TraceRecord], meta: &RunMeta) -> Result<RunReport, MetricsError> {
    let unfinished: Vec<TaskId> = output.tasks.iter().filter(|t| t.state() != TaskState::Completed).map(|t| t.id).collect();
    if !unfinished.is_empty() {
        return Err(MetricsError::Incomplete(unfinished));
    }
    let expected = trace.len() - output.rejected_duplicates;
    if output.outcomes.len() != expected {
        return Err(MetricsError::CountMismatch {
            completed: output.outcomes.len(),
            expected,
        });
    }
    let n = output.outcomes.len();
    let first_arrival = output.outcomes.iter().map(|o| o.arrival_time).min();
    let last_completion = output.outcomes.iter().map(|o| o.completion_time).max();
    let makespan_s = match (first_arrival, last_completion) {
        (Some(a), Some(c)) => (c - a).as_secs(),
        _ => 0.0,
    };
    let missed = output.outcomes.iter().filter(|o| !o.met_deadline).count();
    let mut turnarounds: Vec<f64> = output.outcomes.iter().map(|o| o.turnaround().as_secs()).collect();
    turnarounds.sort_by(f64::total_cmp);
    let start: f64 = output.outcomes.iter().map(|o| o.start_overhead.as_secs()).sum();
    let init: f64 = output.outcomes.iter().map(|o| o.init_overhead.as_secs()).sum();
    Ok(RunReport {
        policy: meta.policy.clone(),
        level: meta.level,
        seed: meta.seed,
        config_digest: meta.config_digest.clone(),
        trace_digest: trace_digest(trace),
        task_count: n,
        makespan_s,
        deadline_miss_count: missed,
        deadline_miss_rate: if n == 0 { 0.0 } else { missed as f64 / n as f64 },
        total_start_overhead_s: start,
        total_init_overhead_s: init,
        mean_turnaround_s: if n == 0 { 0.0 } else { turnarounds.iter().sum::<f64>() / n as f64 },
        p50_turnaround_s: percentile(&turnarounds, 50.0),
        p95_turnaround_s: percentile(&turnarounds, 95.0),
        max_exec_s: output.outcomes.iter().map(|o| o.exec.as_secs()).fold(0.0, f64::max),
        window_memory_utilization: output.window_usage.iter().map(|w| w.memory_utilization).collect(),
        escalations: output.escalations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub level: usize,
    pub n_seeds: usize,
    pub makespan_mean_s: f64,
    /// Half-width of the 95% Student-t interval; `None` with one seed.
    pub makespan_ci95_s: Option<f64>,
    pub miss_rate_mean: f64,
}

/// Sum in ascending order so the result does not depend on input order.
fn stable_mean(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// 95% Student-t half-width over `xs`, `None` for fewer than two values.
pub fn ci95_half_width(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mut v = xs.to_vec();
    let mean = stable_mean(&mut v);
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof >= 1").inverse_cdf(0.975);
    Some(t * (var / n as f64).sqrt())
}

/// Rows keyed by (level, policy), ordered by level then policy name.
pub fn compare(reports: &[RunReport]) -> Result<Vec<ComparisonRow>, MetricsError> {
    let mut digests: BTreeMap<(usize, u64), &str> = BTreeMap::new();
    for r in reports {
        let d = digests.entry((r.level, r.seed)).or_insert(&r.trace_digest);
        if *d != r.trace_digest {
            return Err(MetricsError::TraceMismatch { level: r.level, seed: r.seed });
        }
    }
    let mut groups: BTreeMap<(usize, &str), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.level, &r.policy)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((level, policy), rs)| {
            let mut makespans: Vec<f64> = rs.iter().map(|r| r.makespan_s).collect();
            let mut misses: Vec<f64> = rs.iter().map(|r| r.deadline_miss_rate).collect();
            ComparisonRow {
                policy: policy.to_owned(),
                level,
                n_seeds: rs.len(),
                makespan_ci95_s: ci95_half_width(&makespans),
                makespan_mean_s: stable_mean(&mut makespans),
                miss_rate_mean: stable_mean(&mut misses),
            }
        })
        .collect())
}

pub const REPORT_HEADER: [&str; 7] = ["policy", "level", "seed", "makespan_s", "miss_rate", "start_overhead_s", "init_overhead_s"];

pub fn write_reports_csv(w: impl io::Write, reports: &[RunReport]) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER)?;
    for r in reports {
        out.write_record([
            r.policy.clone(),
            r.level.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.makespan_s),
            format!("{:.6}", r.deadline_miss_rate),
            format!("{:.6}", r.total_start_overhead_s),
            format!("{:.6}", r.total_init_overhead_s),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub const COMPARISON_HEADER: [&str; 6] = ["policy", "level", "n_seeds", "makespan_mean_s", "makespan_ci95_s", "miss_rate_mean"];

pub fn write_comparison_csv(w: impl io::Write, rows: &[ComparisonRow]) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(COMPARISON_HEADER)?;
    for r in rows {
        out.write_record([
            r.policy.clone(),
            r.level.to_string(),
            r.n_seeds.to_string(),
            format!("{:.6}", r.makespan_mean_s),
            r.makespan_ci95_s.map_or_else(|| "n/a".to_owned(), |c| format!("{c:.6}")),
            format!("{:.6}", r.miss_rate_mean),
        ])?;
    }
    out.flush()?;
    Ok(())
}
