//! Synthetic trace generation and JSON Lines trace I/O.
//!
//! Task sets ("batches") arrive on a lull/peak schedule. Each batch is a run
//! of consecutive segments of one stream, processed by a single function
//! drawn from a long-tail popularity distribution.

use std::cmp::Ordering;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{derive_deadline, task_priority, FunctionId, Priority, StreamId, StreamRequest};

/// Batch-start times are snapped to this grid (2^-10 s) so that
/// `start + k * gap` and its differences are exact in binary floating point.
const TIME_GRID: f64 = 1024.0;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub total_tasks: usize,
    pub experiment_window_s: f64,
    pub batch_size_range: (u32, u32),
    pub intra_batch_interarrival_s: f64,
    /// Peak arrival rate as a multiple of the base (lull) rate.
    pub base_peak_rate_ratio: f64,
    /// Lull period length as a multiple of the peak period length.
    pub base_period_multiple: f64,
    pub peak_period_s: f64,
    /// Explicit popularity weights, one per repository function in order.
    /// When absent, weights come from [`popularity_weights`].
    pub function_popularity: Option<Vec<f64>>,
    pub hot_fraction: f64,
    pub hot_mass: f64,
    /// Length range (segments) of the source videos batches are cut from.
    pub stream_length_range: (u32, u32),
    pub segment_duration_s: f64,
    pub startup_allowance_s: f64,
    pub high_priority_prefix: u32,
    pub rng_seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            total_tasks: 400,
            experiment_window_s: 240.0,
            batch_size_range: (5, 20),
            intra_batch_interarrival_s: 2.0,
            base_peak_rate_ratio: 2.0,
            base_period_multiple: 3.0,
            peak_period_s: 30.0,
            function_popularity: None,
            hot_fraction: 0.05,
            hot_mass: 0.8,
            stream_length_range: (5, 110),
            segment_duration_s: 2.0,
            startup_allowance_s: 5.0,
            high_priority_prefix: 3,
            rng_seed: 0,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self, function_count: usize) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Config(m));
        let (lo, hi) = self.batch_size_range;
        if self.total_tasks == 0 {
            return bad("total_tasks must be >= 1".into());
        }
        if lo < 1 || lo > hi {
            return bad(format!("batch_size_range [{lo}, {hi}] must be a non-empty range of positive sizes"));
        }
        for (name, v) in [
            ("experiment_window_s", self.experiment_window_s),
            ("intra_batch_interarrival_s", self.intra_batch_interarrival_s),
            ("base_peak_rate_ratio", self.base_peak_rate_ratio),
            ("base_period_multiple", self.base_period_multiple),
            ("peak_period_s", self.peak_period_s),
            ("segment_duration_s", self.segment_duration_s),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be > 0"));
            }
        }
        if !(self.startup_allowance_s >= 0.0) {
            return bad("startup_allowance_s must be >= 0".into());
        }
        if !splittable(self.total_tasks, lo as usize, hi as usize) {
            return bad(format!("total_tasks={} cannot be split into batches of [{lo}, {hi}]", self.total_tasks));
        }
        if self.stream_length_range.0 < 1 || self.stream_length_range.0 > self.stream_length_range.1 {
            return bad("stream_length_range must be a non-empty range of positive lengths".into());
        }
        if function_count == 0 {
            return bad("function repository is empty".into());
        }
        match &self.function_popularity {
            Some(w) => {
                if w.len() != function_count {
                    return bad(format!(
                        "function_popularity has {} weights for {function_count} functions",
                        w.len()
                    ));
                }
                if w.iter().any(|x| !(*x >= 0.0)) {
                    return bad("function_popularity weights must be >= 0".into());
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return bad(format!("function_popularity sums to {sum}, expected 1"));
                }
            }
            None => {
                if !(self.hot_fraction > 0.0 && self.hot_fraction < 1.0) {
                    return bad("hot_fraction must be in (0, 1)".into());
                }
                if !(self.hot_mass > 0.0 && self.hot_mass < 1.0) {
                    return bad("hot_mass must be in (0, 1)".into());
                }
            }
        }
        Ok(())
    }

    pub fn weights(&self, function_count: usize) -> Vec<f64> {
        self.function_popularity
            .clone()
            .unwrap_or_else(|| popularity_weights(function_count, self.hot_fraction, self.hot_mass))
    }

    pub fn phases(&self) -> PhaseSchedule {
        PhaseSchedule {
            base_len: self.peak_period_s * self.base_period_multiple,
            peak_len: self.peak_period_s,
        }
    }
}

/// Serialized shape of one trace line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub arrival_time_s: f64,
    pub stream_id: StreamId,
    pub segment_index: u32,
    pub function_id: FunctionId,
    pub deadline_s: f64,
    pub priority: Priority,
}

impl TraceRecord {
    pub fn order(&self, other: &TraceRecord) -> Ordering {
        self.arrival_time_s
            .total_cmp(&other.arrival_time_s)
            .then_with(|| self.stream_id.cmp(&other.stream_id))
            .then_with(|| self.segment_index.cmp(&other.segment_index))
    }
}

/// Long-tail weights: the hot `ceil(hot_fraction * n)` functions share
/// `hot_mass` uniformly, the rest share what remains.
pub fn popularity_weights(function_count: usize, hot_fraction: f64, hot_mass: f64) -> Vec<f64> {
    if function_count == 0 {
        return Vec::new();
    }
    let hot = ((hot_fraction * function_count as f64).ceil() as usize).clamp(1, function_count);
    let cold = function_count - hot;
    if cold == 0 {
        return vec![1.0 / function_count as f64; function_count];
    }
    let mut w = vec![hot_mass / hot as f64; hot];
    w.extend(std::iter::repeat_n((1.0 - hot_mass) / cold as f64, cold));
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Lull,
    Peak,
}

/// Alternating lull/peak schedule starting with a lull at t = 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSchedule {
    pub base_len: f64,
    pub peak_len: f64,
}

impl PhaseSchedule {
    pub fn cycle_len(&self) -> f64 {
        self.base_len + self.peak_len
    }

    pub fn phase_at(&self, t: f64) -> Phase {
        let r = t.rem_euclid(self.cycle_len());
        if r < self.base_len {
            Phase::Lull
        } else {
            Phase::Peak
        }
    }

    /// Phase intervals `(start, end, phase)` in order, unbounded.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64, Phase)> + '_ {
        (0u64..).flat_map(move |k| {
            let c = k as f64 * self.cycle_len();
            [
                (c, c + self.base_len, Phase::Lull),
                (c + self.base_len, c + self.cycle_len(), Phase::Peak),
            ]
        })
    }

    /// Time spent in (lull, peak) over `[0, horizon)`.
    pub fn durations_until(&self, horizon: f64) -> (f64, f64) {
        let mut lull = 0.0;
        let mut peak = 0.0;
        for (s, e, p) in self.intervals() {
            if s >= horizon {
                break;
            }
            let d = e.min(horizon) - s;
            match p {
                Phase::Lull => lull += d,
                Phase::Peak => peak += d,
            }
        }
        (lull, peak)
    }
}

/// Generates a reproducible trace for `functions`, listed in popularity-rank
/// order (index 0 is the most popular).
///
/// Batch sizes are drawn first. Their count is then split between lull and
/// peak time in proportion to rate × duration, spread over the phases of the
/// experiment window by largest remainder, and the starts inside each phase
/// are uniform: a Poisson process conditioned on its per-phase counts.
pub fn generate_trace(config: &WorkloadConfig, functions: &[FunctionId]) -> Result<Vec<TraceRecord>, WorkloadError> {
    config.validate(functions.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let weights = config.weights(functions.len());
    let picker = WeightedIndex::new(&weights).map_err(|e| WorkloadError::Config(format!("popularity weights: {e}")))?;

    let (lo, hi) = config.batch_size_range;
    let mut sizes = Vec::new();
    let mut remaining = config.total_tasks;
    while remaining > 0 {
        let size = batch_size(&mut rng, lo as usize, hi as usize, remaining);
        sizes.push(size);
        remaining -= size;
    }

    let window = config.experiment_window_s;
    let phases: Vec<(f64, f64, Phase)> = config
        .phases()
        .intervals()
        .take_while(|(s, _, _)| *s < window)
        .map(|(s, e, p)| (s, e.min(window), p))
        .collect();
    let (lull_len, peak_len) = config.phases().durations_until(window);
    let peak_weight = config.base_peak_rate_ratio * peak_len;
    let peak_batches = (sizes.len() as f64 * peak_weight / (peak_weight + lull_len)).round() as usize;
    let lull_batches = sizes.len() - peak_batches;
    let mut counts = vec![0usize; phases.len()];
    for (kind, total) in [(Phase::Lull, lull_batches), (Phase::Peak, peak_batches)] {
        let idx: Vec<usize> = (0..phases.len()).filter(|i| phases[*i].2 == kind).collect();
        let len: f64 = idx.iter().map(|i| phases[*i].1 - phases[*i].0).sum();
        spread(total, &idx, len, &phases, &mut counts);
    }

    let mut starts: Vec<f64> = Vec::with_capacity(sizes.len());
    for ((start, end, _), n) in phases.iter().zip(&counts) {
        for _ in 0..*n {
            starts.push(snap(rng.random_range(*start..*end)));
        }
    }
    starts.sort_by(f64::total_cmp);

    let mut records = Vec::with_capacity(config.total_tasks);
    for (batch_no, (batch_start, size)) in starts.into_iter().zip(sizes).enumerate() {
        let function = &functions[picker.sample(&mut rng)];
        let (len_lo, len_hi) = config.stream_length_range;
        let stream_len = rng.random_range(len_lo..=len_hi);
        let max_offset = stream_len.saturating_sub(size as u32);
        let offset = rng.random_range(0..=max_offset);
        let request = StreamRequest {
            stream_id: StreamId::new(format!("s{batch_no:06}")),
            request_time: batch_start,
            segment_count: size as u32,
            function_id: function.clone(),
            segment_duration: config.intra_batch_interarrival_s,
        };
        for k in 0..size as u32 {
            let segment_index = offset + k;
            let deadline = derive_deadline(&request, k, config.startup_allowance_s).expect("k < segment_count");
            records.push(TraceRecord {
                arrival_time_s: batch_start + f64::from(k) * config.intra_batch_interarrival_s,
                stream_id: request.stream_id.clone(),
                segment_index,
                function_id: function.clone(),
                deadline_s: deadline,
                priority: task_priority(segment_index, false, config.high_priority_prefix),
            });
        }
    }
    records.sort_by(TraceRecord::order);
    Ok(records)
}

/// Largest-remainder split of `total` over the phases `idx`, proportional
/// to their lengths.
fn spread(total: usize, idx: &[usize], len: f64, phases: &[(f64, f64, Phase)], counts: &mut [usize]) {
    if idx.is_empty() || total == 0 {
        return;
    }
    let quotas: Vec<f64> = idx.iter().map(|i| total as f64 * (phases[*i].1 - phases[*i].0) / len).collect();
    let mut given = 0;
    for (i, q) in idx.iter().zip(&quotas) {
        counts[*i] = q.floor() as usize;
        given += counts[*i];
    }
    let mut order: Vec<usize> = (0..idx.len()).collect();
    // larger remainder first, earlier phase on ties
    order.sort_by(|a, b| (quotas[*b] - quotas[*b].floor()).total_cmp(&(quotas[*a] - quotas[*a].floor())).then(a.cmp(b)));
    for k in order.into_iter().take(total - given) {
        counts[idx[k]] += 1;
    }
}

/// Draws a batch size in `[lo, hi]` that leaves a remainder which can
/// itself be split into sizes within `[lo, hi]`.
fn batch_size(rng: &mut impl Rng, lo: usize, hi: usize, remaining: usize) -> usize {
    if remaining <= hi {
        return remaining;
    }
    rng.random_range(lo..=hi.min(remaining - lo))
}

/// Whether `total` splits into parts that each lie in `[lo, hi]`.
fn splittable(total: usize, lo: usize, hi: usize) -> bool {
    // k parts cover [k*lo, k*hi]
    (1..=total / lo.max(1)).any(|k| k * lo <= total && total <= k * hi)
}

fn snap(t: f64) -> f64 {
    (t * TIME_GRID).floor() / TIME_GRID
}

pub fn trace_to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 128);
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<(), WorkloadError> {
    let io_err = |source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(trace_to_jsonl(records).as_bytes()).map_err(io_err)?;
    file.flush().map_err(io_err)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, WorkloadError> {
    let file = fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(BufReader::new(file))
}

/// Parses JSON Lines, rejecting malformed, invalid, or out-of-order records.
/// Blank lines are ignored.
pub fn parse_trace(reader: impl BufRead) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut records: Vec<TraceRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| WorkloadError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !rec.arrival_time_s.is_finite() || rec.arrival_time_s < 0.0 {
            return Err(WorkloadError::Parse {
                line: line_no,
                message: "arrival_time_s must be finite and >= 0".into(),
            });
        }
        if !(rec.deadline_s >= rec.arrival_time_s) || !rec.deadline_s.is_finite() {
            return Err(WorkloadError::Parse {
                line: line_no,
                message: "deadline_s must be >= arrival_time_s".into(),
            });
        }
        if let Some(prev) = records.last() {
            if prev.order(&rec) != Ordering::Less {
                return Err(WorkloadError::Parse {
                    line: line_no,
                    message: "records out of order (arrival_time_s, stream_id, segment_index)".into(),
                });
            }
        }
        records.push(rec);
    }
    Ok(records)
}
