//! Window monitoring and durable-container provisioning.
//!
//! Each container slot `f_ij` is scored by its benefit-per-cost ratio:
//!
//! ```text
//! B   = mu * delta          (tasks triggered x time saved per warm task)
//! M_r = M * U               (memory the slot would hold anyway as ephemeral)
//! C   = M - M_r             (extra memory a durable instance pins)
//! BCR = B / C               (+inf when C = 0 and B > 0, 0 when B = 0)
//! ```
//!
//! [`allocate`] then greedily promotes the highest-ratio slots to durable
//! while memory beyond the ephemeral reservation remains.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ContainerRecord, FunctionId, FunctionSpec, MonitorSnapshot, ProvisioningPlan, Repository};

#[derive(Debug, Error, PartialEq)]
pub enum ProvisionError {
    #[error("static plan needs {needed_mb} MiB but host has {total_mb} MiB")]
    StaticExceedsMemory { needed_mb: f64, total_mb: f64 },
    #[error("static plan references unknown function {0}")]
    UnknownFunction(FunctionId),
}

/// Time saved per task by a warm durable container over an ephemeral one.
pub fn compute_delta(spec: &FunctionSpec) -> f64 {
    let ephemeral = spec.start_time_s + spec.exec_time_s;
    let durable = spec.transfer_time_s + spec.exec_time_s;
    (ephemeral - durable).max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    /// From the configured timing profile.
    #[default]
    Analytic,
    /// From measured turnaround means, falling back to analytic until both
    /// an ephemeral and a warm durable run of the function have been seen.
    Empirical,
}

#[derive(Clone, Copy, Debug, Default)]
struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Per-host accounting of slot busy time, triggers and concurrency, closed
/// into a [`MonitorSnapshot`] at every provisioning tick.
#[derive(Clone, Debug)]
pub struct WindowMonitor {
    alpha: usize,
    busy: BTreeMap<(FunctionId, u32), f64>,
    triggers: BTreeMap<(FunctionId, u32), u32>,
    live: BTreeMap<FunctionId, u32>,
    window_peak: BTreeMap<FunctionId, u32>,
    history: VecDeque<BTreeMap<FunctionId, u32>>,
    ephemeral_turnaround: BTreeMap<FunctionId, Mean>,
    warm_turnaround: BTreeMap<FunctionId, Mean>,
}

impl WindowMonitor {
    pub fn new(alpha: usize) -> Self {
        WindowMonitor {
            alpha: alpha.max(1),
            busy: BTreeMap::new(),
            triggers: BTreeMap::new(),
            live: BTreeMap::new(),
            window_peak: BTreeMap::new(),
            history: VecDeque::new(),
            ephemeral_turnaround: BTreeMap::new(),
            warm_turnaround: BTreeMap::new(),
        }
    }

    pub fn alpha(&self) -> usize {
        self.alpha
    }

    pub fn add_busy(&mut self, function_id: &FunctionId, instance: u32, seconds: f64) {
        *self.busy.entry((function_id.clone(), instance)).or_default() += seconds;
    }

    pub fn add_trigger(&mut self, function_id: &FunctionId, instance: u32) {
        *self.triggers.entry((function_id.clone(), instance)).or_default() += 1;
    }

    pub fn instance_up(&mut self, function_id: &FunctionId) {
        let live = self.live.entry(function_id.clone()).or_default();
        *live += 1;
        let peak = self.window_peak.entry(function_id.clone()).or_default();
        *peak = (*peak).max(*live);
    }

    pub fn instance_down(&mut self, function_id: &FunctionId) {
        if let Some(live) = self.live.get_mut(function_id) {
            *live = live.saturating_sub(1);
        }
    }

    pub fn live_instances(&self, function_id: &FunctionId) -> u32 {
        self.live.get(function_id).copied().unwrap_or(0)
    }

    pub fn record_ephemeral_turnaround(&mut self, function_id: &FunctionId, seconds: f64) {
        self.ephemeral_turnaround.entry(function_id.clone()).or_default().push(seconds);
    }

    pub fn record_warm_turnaround(&mut self, function_id: &FunctionId, seconds: f64) {
        self.warm_turnaround.entry(function_id.clone()).or_default().push(seconds);
    }

    pub fn empirical_delta(&self, function_id: &FunctionId) -> Option<f64> {
        let e = self.ephemeral_turnaround.get(function_id)?.get()?;
        let w = self.warm_turnaround.get(function_id)?.get()?;
        Some((e - w).max(0.0))
    }

    /// Closes the current window of length `window_len_s`.
    ///
    /// `live_slots` lists the slots of containers alive at the close, so idle
    /// durable instances still appear (with zero utilization).
    pub fn snapshot_window(&mut self, window_id: u64, window_len_s: f64, live_slots: &[(FunctionId, u32)]) -> MonitorSnapshot {
        let mut slots: BTreeSet<(FunctionId, u32)> = self.busy.keys().cloned().collect();
        slots.extend(self.triggers.keys().cloned());
        slots.extend(live_slots.iter().cloned());
        let records = slots
            .into_iter()
            .map(|key| {
                let busy = self.busy.get(&key).copied().unwrap_or(0.0);
                let utilization = if window_len_s > 0.0 {
                    (busy / window_len_s).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                ContainerRecord {
                    trigger_count: self.triggers.get(&key).copied().unwrap_or(0),
                    function_id: key.0,
                    instance_index: key.1,
                    utilization,
                }
            })
            .collect();

        let peak = std::mem::take(&mut self.window_peak);
        self.history.push_back(peak);
        while self.history.len() > self.alpha {
            self.history.pop_front();
        }
        let mut max_concurrency: BTreeMap<FunctionId, u32> = BTreeMap::new();
        for window in &self.history {
            for (f, n) in window {
                let e = max_concurrency.entry(f.clone()).or_default();
                *e = (*e).max(*n);
            }
        }
        max_concurrency.retain(|_, n| *n > 0);

        self.busy.clear();
        self.triggers.clear();
        // the next window starts with whatever is alive now
        for (f, n) in &self.live {
            if *n > 0 {
                self.window_peak.insert(f.clone(), *n);
            }
        }
        MonitorSnapshot {
            window_id,
            records,
            max_concurrency,
        }
    }
}

/// Builds a snapshot purely from per-window concurrency samples, used where
/// only the history-window semantics matter.
pub fn max_concurrency_degree(per_window: &[u32], alpha: usize) -> u32 {
    per_window.iter().rev().take(alpha.max(1)).copied().max().unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub function_id: FunctionId,
    pub instance_index: u32,
    pub utilization: f64,
    pub trigger_count: u32,
    pub delta_s: f64,
    pub memory_mb: f64,
    pub reserved_mb: f64,
    pub benefit: f64,
    pub cost: f64,
    /// `f64::INFINITY` encodes the unbounded ratio.
    pub bcr: f64,
}

impl CandidateScore {
    pub fn new(function_id: FunctionId, instance_index: u32, utilization: f64, trigger_count: u32, delta_s: f64, memory_mb: f64) -> Self {
        let utilization = utilization.clamp(0.0, 1.0);
        let benefit = f64::from(trigger_count) * delta_s;
        let reserved_mb = memory_mb * utilization;
        let cost = memory_mb - reserved_mb;
        let bcr = if benefit == 0.0 {
            0.0
        } else if cost > 0.0 {
            benefit / cost
        } else {
            f64::INFINITY
        };
        CandidateScore {
            function_id,
            instance_index,
            utilization,
            trigger_count,
            delta_s,
            memory_mb,
            reserved_mb,
            benefit,
            cost,
            bcr,
        }
    }

    /// Greedy selection order: higher ratio first; unbounded ratios first and
    /// ranked among themselves by benefit; then lower function id and lower
    /// instance index.
    pub fn selection_order(&self, other: &CandidateScore) -> Ordering {
        let by_ratio = match (self.bcr.is_infinite(), other.bcr.is_infinite()) {
            (true, true) => other.benefit.total_cmp(&self.benefit),
            (true, false) => Ordering::Less,
            (false, true) => Ordering::Greater,
            (false, false) => other.bcr.total_cmp(&self.bcr),
        };
        by_ratio
            .then_with(|| self.function_id.cmp(&other.function_id))
            .then_with(|| self.instance_index.cmp(&other.instance_index))
    }
}

/// One candidate per `(f, j)` with `1 <= j <= n(f)`. Functions never observed
/// get no candidates.
pub fn score_candidates(snapshot: &MonitorSnapshot, repository: &Repository, deltas: &BTreeMap<FunctionId, f64>) -> Vec<CandidateScore> {
    let mut out = Vec::new();
    for (function_id, &degree) in &snapshot.max_concurrency {
        let Some(spec) = repository.get(function_id) else {
            continue;
        };
        let delta = deltas.get(function_id).copied().unwrap_or_else(|| compute_delta(spec));
        for j in 1..=degree {
            let (u, mu) = snapshot
                .record(function_id, j)
                .map(|r| (r.utilization, r.trigger_count))
                .unwrap_or((0.0, 0));
            out.push(CandidateScore::new(function_id.clone(), j, u, mu, delta, spec.memory_mb));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationLoop {
    /// Skip candidates whose pinned memory would overshoot the host.
    #[default]
    FitCheck,
    /// The literal greedy loop: headroom is only checked before
    /// each selection, so the last pick may overshoot.
    StrictPaperLoop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub function_id: FunctionId,
    pub instance_index: u32,
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub bcr: f64,
}

fn ser_ratio<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_ratio<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Ratio {
        Num(f64),
        Text(String),
    }
    match Ratio::deserialize(d)? {
        Ratio::Num(x) => Ok(x),
        Ratio::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Ratio::Text(t) => Err(serde::de::Error::custom(format!("bad ratio {t}"))),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Allocation {
    pub plan: ProvisioningPlan,
    /// Candidates in the order they were promoted.
    pub selections: Vec<Selection>,
}

/// Greedy benefit-per-cost allocation of durable containers.
///
/// The ephemeral reservation is the sum of `M_r` over candidates not yet
/// promoted; each promotion adds `M` to the durable total. Ratios do not change
/// during the loop, so one sorted pass visits candidates in exactly the
/// order a repeated argmax would.
pub fn allocate(scores: &[CandidateScore], total_memory_mb: f64, mode: AllocationLoop) -> Allocation {
    let mut order: Vec<&CandidateScore> = scores.iter().collect();
    order.sort_by(|a, b| a.selection_order(b));

    // summed afresh over the unselected suffix so rounding never drives it negative
    let reserved_from = |k: usize| order[k..].iter().map(|s| s.reserved_mb).sum::<f64>();
    let mut plan = ProvisioningPlan::default();
    let mut allocated = 0.0;
    let mut skipped_reserved = 0.0;
    let mut reserved = reserved_from(0);
    let mut selections = Vec::new();
    for (k, cand) in order.iter().enumerate() {
        if total_memory_mb - reserved - allocated <= 0.0 || cand.bcr <= 0.0 {
            break;
        }
        if mode == AllocationLoop::FitCheck && cand.memory_mb > total_memory_mb - reserved - allocated + cand.reserved_mb {
            skipped_reserved += cand.reserved_mb;
            continue;
        }
        *plan.allocations.entry(cand.function_id.clone()).or_default() += 1;
        allocated += cand.memory_mb;
        reserved = skipped_reserved + reserved_from(k + 1);
        selections.push(Selection {
            function_id: cand.function_id.clone(),
            instance_index: cand.instance_index,
            bcr: cand.bcr,
        });
    }
    plan.allocated_memory_mb = allocated;
    plan.reserved_memory_mb = reserved;
    Allocation { plan, selections }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    DynamicDurable,
    StaticDurable { counts: BTreeMap<FunctionId, u32> },
    EphemeralOnly,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::DynamicDurable => "dynamic",
            PolicyKind::StaticDurable { .. } => "static",
            PolicyKind::EphemeralOnly => "ephemeral",
        }
    }

    /// One durable instance for every repository function.
    pub fn static_one_each(repository: &Repository) -> Self {
        PolicyKind::StaticDurable {
            counts: repository.ids().into_iter().map(|f| (f, 1)).collect(),
        }
    }

    /// Checks a static plan against the host at startup.
    pub fn validate(&self, repository: &Repository, total_memory_mb: f64) -> Result<(), ProvisionError> {
        if let PolicyKind::StaticDurable { counts } = self {
            static_plan(counts, repository, total_memory_mb).map(|_| ())
        } else {
            Ok(())
        }
    }
}

fn static_plan(counts: &BTreeMap<FunctionId, u32>, repository: &Repository, total_memory_mb: f64) -> Result<ProvisioningPlan, ProvisionError> {
    let mut needed = 0.0;
    for (f, c) in counts {
        let spec = repository.get(f).ok_or_else(|| ProvisionError::UnknownFunction(f.clone()))?;
        needed += spec.memory_mb * f64::from(*c);
    }
    if needed > total_memory_mb {
        return Err(ProvisionError::StaticExceedsMemory {
            needed_mb: needed,
            total_mb: total_memory_mb,
        });
    }
    Ok(ProvisioningPlan {
        allocations: counts.iter().filter(|(_, c)| **c > 0).map(|(f, c)| (f.clone(), *c)).collect(),
        allocated_memory_mb: needed,
        reserved_memory_mb: 0.0,
        produced_at_window: 0,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionerOptions {
    pub loop_mode: AllocationLoop,
    pub delta_mode: DeltaMode,
}

/// The plan the active policy wants for the next slot.
pub fn policy_plan(
    kind: &PolicyKind,
    snapshot: &MonitorSnapshot,
    repository: &Repository,
    total_memory_mb: f64,
    mode: AllocationLoop,
    deltas: &BTreeMap<FunctionId, f64>,
) -> Result<Allocation, ProvisionError> {
    let mut allocation = match kind {
        PolicyKind::EphemeralOnly => Allocation::default(),
        PolicyKind::StaticDurable { counts } => Allocation {
            plan: static_plan(counts, repository, total_memory_mb)?,
            selections: Vec::new(),
        },
        PolicyKind::DynamicDurable => {
            let scores = score_candidates(snapshot, repository, deltas);
            allocate(&scores, total_memory_mb, mode)
        }
    };
    allocation.plan.produced_at_window = snapshot.window_id;
    Ok(allocation)
}
