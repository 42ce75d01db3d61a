//! Deterministic discrete-event simulation of hosts, containers, machine
//! queues and task execution.
//!
//! Ephemeral containers are launched per task and pay their start latency
//! every time. Durable containers are launched by the provisioning plan,
//! keep a local FCFS queue (Urgent tasks skip ahead), pay start and init on
//! their first task and only the segment transfer afterwards.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    ContainerMode, ContainerRef, FunctionId, FunctionSpec, MonitorSnapshot, Priority, ProvisioningPlan, Repository, SimTime, Task,
    TaskId, TaskState,
};
use crate::estimator::EstimationMatrix;
use crate::provisioner::{compute_delta, policy_plan, AllocationLoop, DeltaMode, PolicyKind, Selection, WindowMonitor};
use crate::scheduler::{schedule_round, watchdog_scan, Admission, Assignment, CandidateUnit, SchedulerConfig, SharedTaskQueue, UnitRef};
use crate::workload::TraceRecord;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("event scheduled at {at} before current time {now}")]
    TimeRegression { at: SimTime, now: SimTime },
    #[error("durable container {container} cannot serve function {function}")]
    CapabilityMismatch { container: ContainerRef, function: FunctionId },
    #[error("plan needs {needed_mb} MiB of durable memory, host {host} has {total_mb} MiB")]
    PlanExceedsMemory { host: usize, needed_mb: f64, total_mb: f64 },
    #[error("trace references unknown function {0}")]
    UnknownFunction(FunctionId),
    #[error("function {function} needs {needed_mb} MiB, larger than every host")]
    FunctionTooLarge { function: FunctionId, needed_mb: f64 },
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("no progress possible with {queued} tasks still queued at {at}")]
    Stalled { queued: usize, at: SimTime },
    #[error(transparent)]
    Provision(#[from] crate::provisioner::ProvisionError),
    #[error(transparent)]
    Domain(#[from] crate::domain::DomainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostConfig {
    pub total_memory_mb: f64,
    pub ephemeral_concurrency_cap: Option<usize>,
    /// Seeds this host's execution-time jitter.
    pub rng_seed: u64,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            total_memory_mb: crate::config::DEFAULT_HOST_MEMORY_MB,
            ephemeral_concurrency_cap: None,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub hosts: Vec<HostConfig>,
    pub scheduler: SchedulerConfig,
    pub provisioning_period_s: f64,
    pub alpha: usize,
    /// Execution times are sampled uniformly within `exec * (1 ± jitter)`.
    pub jitter_fraction: f64,
    pub allocation_loop: AllocationLoop,
    pub delta_mode: DeltaMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            hosts: vec![HostConfig::default()],
            scheduler: SchedulerConfig::default(),
            provisioning_period_s: 30.0,
            alpha: 3,
            jitter_fraction: 0.1,
            allocation_loop: AllocationLoop::FitCheck,
            delta_mode: DeltaMode::Analytic,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_owned()));
        if self.hosts.is_empty() {
            return bad("at least one host is required");
        }
        if self.hosts.iter().any(|h| !(h.total_memory_mb > 0.0)) {
            return bad("total_memory_mb must be > 0");
        }
        if !(self.provisioning_period_s > 0.0) {
            return bad("provisioning_period_s must be > 0");
        }
        if !(self.scheduler.watchdog_period_s > 0.0) {
            return bad("watchdog_period_s must be > 0");
        }
        if self.alpha == 0 {
            return bad("alpha must be >= 1");
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return bad("jitter_fraction must be in [0, 1)");
        }
        if self.scheduler.oversubscription_threshold == 0 {
            return bad("oversubscription_threshold must be >= 1");
        }
        Ok(())
    }
}

/// Execution time drawn uniformly from `exec * [1 - jitter, 1 + jitter]`.
pub fn sample_exec_time(spec: &FunctionSpec, jitter_fraction: f64, rng: &mut impl Rng) -> f64 {
    if jitter_fraction <= 0.0 {
        return spec.exec_time_s;
    }
    let lo = spec.exec_time_s * (1.0 - jitter_fraction);
    let hi = spec.exec_time_s * (1.0 + jitter_fraction);
    rng.random_range(lo..=hi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionOutcome {
    pub task: TaskId,
    pub function_id: FunctionId,
    pub container: ContainerRef,
    pub mode: ContainerMode,
    pub priority: Priority,
    pub arrival_time: SimTime,
    /// When the task entered the container's queue (Pending).
    pub assigned_at: SimTime,
    /// Monotone assignment counter, orders same-instant enqueues.
    pub assign_seq: u64,
    pub dispatch_time: SimTime,
    pub start_overhead: SimTime,
    pub init_overhead: SimTime,
    pub transfer: SimTime,
    pub exec: SimTime,
    pub completion_time: SimTime,
    pub deadline: SimTime,
    pub met_deadline: bool,
}

impl ExecutionOutcome {
    pub fn queue_wait(&self) -> SimTime {
        self.dispatch_time - self.arrival_time
    }

    pub fn turnaround(&self) -> SimTime {
        self.completion_time - self.arrival_time
    }

    pub fn exec_start(&self) -> SimTime {
        self.completion_time - self.exec
    }
}

fn outcome(task: &Task, container: ContainerRef, mode: ContainerMode, now: SimTime, overheads: [SimTime; 3], exec: SimTime) -> ExecutionOutcome {
    let [start, init, transfer] = overheads;
    let completion = now + start + init + transfer + exec;
    ExecutionOutcome {
        task: task.id,
        function_id: task.function_id.clone(),
        container,
        mode,
        priority: task.priority,
        arrival_time: task.arrival_time,
        assigned_at: now,
        assign_seq: 0,
        dispatch_time: now,
        start_overhead: start,
        init_overhead: init,
        transfer,
        exec,
        completion_time: completion,
        deadline: task.deadline,
        met_deadline: completion <= task.deadline,
    }
}

/// Outcome of running `task` in a fresh ephemeral container dispatched at
/// `now`: container start, then execution.
pub fn execute_on_ephemeral(task: &Task, spec: &FunctionSpec, now: SimTime, exec_s: f64, container: ContainerRef) -> ExecutionOutcome {
    outcome(
        task,
        container,
        ContainerMode::Ephemeral,
        now,
        [SimTime::from_secs(spec.start_time_s), SimTime::ZERO, SimTime::ZERO],
        SimTime::from_secs(exec_s),
    )
}

/// Outcome of running `task` on a durable container. A cold container pays
/// start and queue initialization; a warm one only the segment transfer.
pub fn execute_on_durable(
    task: &Task,
    container: &ContainerRef,
    warm: bool,
    spec: &FunctionSpec,
    now: SimTime,
    exec_s: f64,
) -> Result<ExecutionOutcome, EngineError> {
    if container.function_id != task.function_id || spec.function_id != task.function_id {
        return Err(EngineError::CapabilityMismatch {
            container: container.clone(),
            function: task.function_id.clone(),
        });
    }
    let overheads = if warm {
        [SimTime::ZERO, SimTime::ZERO, SimTime::from_secs(spec.transfer_time_s)]
    } else {
        [SimTime::from_secs(spec.start_time_s), SimTime::from_secs(spec.init_time_s), SimTime::ZERO]
    };
    Ok(outcome(task, container.clone(), ContainerMode::Durable, now, overheads, SimTime::from_secs(exec_s)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    ContainerStarted,
    ContainerInitialized,
    TaskCompleted,
    ProvisioningTick,
    WatchdogTick,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Payload {
    Arrival(usize),
    ContainerStarted(u64),
    ContainerInitialized(u64),
    TaskCompleted(u64),
    ProvisioningTick(u64),
    WatchdogTick,
}

impl Payload {
    fn kind(&self) -> EventKind {
        match self {
            Payload::Arrival(_) => EventKind::Arrival,
            Payload::ContainerStarted(_) => EventKind::ContainerStarted,
            Payload::ContainerInitialized(_) => EventKind::ContainerInitialized,
            Payload::TaskCompleted(_) => EventKind::TaskCompleted,
            Payload::ProvisioningTick(_) => EventKind::ProvisioningTick,
            Payload::WatchdogTick => EventKind::WatchdogTick,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimEvent {
    pub time: SimTime,
    pub sequence_number: u64,
    payload: Payload,
}

impl SimEvent {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.sequence_number).cmp(&(other.time, other.sequence_number))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// What a log line describes: a processed event or an engine action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Arrival,
    ContainerStarted,
    ContainerInitialized,
    TaskCompleted,
    ProvisioningTick,
    WatchdogTick,
    Assign,
    Dispatch,
    Launch,
    Retire,
    Escalate,
}

impl From<EventKind> for LogKind {
    fn from(k: EventKind) -> Self {
        match k {
            EventKind::Arrival => LogKind::Arrival,
            EventKind::ContainerStarted => LogKind::ContainerStarted,
            EventKind::ContainerInitialized => LogKind::ContainerInitialized,
            EventKind::TaskCompleted => LogKind::TaskCompleted,
            EventKind::ProvisioningTick => LogKind::ProvisioningTick,
            EventKind::WatchdogTick => LogKind::WatchdogTick,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time_s: f64,
    pub kind: LogKind,
    pub task: Option<TaskId>,
    pub container: Option<String>,
    pub mode: Option<ContainerMode>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HostMemory {
    pub used_mb: f64,
    pub total_mb: f64,
}

/// Receives every log entry together with the memory state right after it.
pub trait RunObserver {
    fn on_entry(&mut self, _entry: &LogEntry, _memory: &[HostMemory]) {}
}

pub struct NullObserver;

impl RunObserver for NullObserver {}

/// Collects log entries as JSON Lines.
#[derive(Default)]
pub struct EventLog {
    pub lines: String,
}

impl RunObserver for EventLog {
    fn on_entry(&mut self, entry: &LogEntry, _memory: &[HostMemory]) {
        self.lines.push_str(&serde_json::to_string(entry).expect("log entries serialize"));
        self.lines.push('\n');
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanLogEntry {
    pub window_id: u64,
    pub time_s: f64,
    pub host: usize,
    pub policy: String,
    pub allocations: BTreeMap<FunctionId, u32>,
    #[serde(rename = "M_A")]
    pub allocated_memory_mb: f64,
    #[serde(rename = "M_R")]
    pub reserved_memory_mb: f64,
    pub selections: Vec<Selection>,
    pub applied: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContainerDelta {
    pub launched: Vec<ContainerRef>,
    /// Launches waiting for memory held by running ephemeral containers.
    pub queued_launches: Vec<FunctionId>,
    pub cancelled_launches: Vec<FunctionId>,
    pub retired: Vec<ContainerRef>,
    pub draining: Vec<ContainerRef>,
    pub resumed: Vec<ContainerRef>,
}

impl ContainerDelta {
    pub fn is_empty(&self) -> bool {
        self.launched.is_empty()
            && self.queued_launches.is_empty()
            && self.cancelled_launches.is_empty()
            && self.retired.is_empty()
            && self.draining.is_empty()
            && self.resumed.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OverheadCounters {
    pub start_s: f64,
    pub init_s: f64,
    pub transfer_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowUsage {
    pub window_id: u64,
    pub host: usize,
    pub time_s: f64,
    pub memory_utilization: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// In completion order.
    pub outcomes: Vec<ExecutionOutcome>,
    pub tasks: Vec<Task>,
    pub snapshots: Vec<(usize, MonitorSnapshot)>,
    pub plan_log: Vec<PlanLogEntry>,
    pub window_usage: Vec<WindowUsage>,
    pub counters: OverheadCounters,
    pub rejected_duplicates: usize,
    pub escalations: usize,
}

impl RunOutput {
    pub fn plan_log_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.plan_log {
            out.push_str(&serde_json::to_string(e).expect("plan log serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
struct RunningTask {
    outcome: ExecutionOutcome,
    /// Busy time already credited to the monitor, up to this instant.
    accounted_until: SimTime,
}

#[derive(Clone, Debug)]
struct QueuedTask {
    task: TaskId,
    urgent: bool,
    assigned_at: SimTime,
    seq: u64,
}

#[derive(Clone, Debug)]
struct Container {
    cref: ContainerRef,
    mode: ContainerMode,
    warm: bool,
    retiring: bool,
    local_queue: VecDeque<QueuedTask>,
    running: Option<RunningTask>,
}

impl Container {
    fn idle(&self) -> bool {
        self.running.is_none() && self.local_queue.is_empty()
    }
}

struct HostState {
    config: HostConfig,
    used_mb: f64,
    pending_launches: VecDeque<FunctionId>,
    monitor: WindowMonitor,
    plan: ProvisioningPlan,
    rng: ChaCha8Rng,
    window_start: SimTime,
    ephemeral_live: usize,
}

impl HostState {
    fn pending_mb(&self, repo: &Repository) -> f64 {
        self.pending_launches.iter().filter_map(|f| repo.get(f)).map(|s| s.memory_mb).sum()
    }
}

/// Runs `trace` to quiescence.
pub fn run(
    trace: &[TraceRecord],
    config: &EngineConfig,
    repository: &Repository,
    policy: &PolicyKind,
    estimator: EstimationMatrix,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput, EngineError> {
    Simulation::new(config, repository, policy, estimator, observer)?.run(trace)
}

struct Simulation<'a> {
    config: &'a EngineConfig,
    repo: &'a Repository,
    policy: &'a PolicyKind,
    estimator: EstimationMatrix,
    observer: &'a mut dyn RunObserver,

    now: SimTime,
    seq: u64,
    events: BinaryHeap<Reverse<SimEvent>>,
    periodic_only: usize,

    tasks: Vec<Task>,
    queue: SharedTaskQueue,
    admission: Admission,
    hosts: Vec<HostState>,
    containers: BTreeMap<u64, Container>,
    next_container: u64,
    assign_seq: u64,
    memory: Vec<HostMemory>,

    trace_len: usize,
    arrivals_seen: usize,
    completed: usize,
    idle_ticks: usize,

    output: RunOutput,
}

impl<'a> Simulation<'a> {
    fn new(
        config: &'a EngineConfig,
        repo: &'a Repository,
        policy: &'a PolicyKind,
        estimator: EstimationMatrix,
        observer: &'a mut dyn RunObserver,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let max_host = config.hosts.iter().map(|h| h.total_memory_mb).fold(0.0, f64::max);
        for spec in repo.specs() {
            if spec.memory_mb > max_host {
                return Err(EngineError::FunctionTooLarge {
                    function: spec.function_id.clone(),
                    needed_mb: spec.memory_mb,
                });
            }
        }
        for h in &config.hosts {
            policy.validate(repo, h.total_memory_mb)?;
        }
        let hosts = config
            .hosts
            .iter()
            .map(|h| HostState {
                config: h.clone(),
                used_mb: 0.0,
                pending_launches: VecDeque::new(),
                monitor: WindowMonitor::new(config.alpha),
                plan: ProvisioningPlan::default(),
                rng: ChaCha8Rng::seed_from_u64(h.rng_seed),
                window_start: SimTime::ZERO,
                ephemeral_live: 0,
            })
            .collect::<Vec<_>>();
        let memory = config
            .hosts
            .iter()
            .map(|h| HostMemory {
                used_mb: 0.0,
                total_mb: h.total_memory_mb,
            })
            .collect();
        Ok(Simulation {
            config,
            repo,
            policy,
            estimator,
            observer,
            now: SimTime::ZERO,
            seq: 0,
            events: BinaryHeap::new(),
            periodic_only: 0,
            tasks: Vec::new(),
            queue: SharedTaskQueue::new(),
            admission: Admission::new(config.scheduler.high_priority_prefix),
            hosts,
            containers: BTreeMap::new(),
            next_container: 0,
            assign_seq: 0,
            memory,
            trace_len: 0,
            arrivals_seen: 0,
            completed: 0,
            idle_ticks: 0,
            output: RunOutput {
                outcomes: Vec::new(),
                tasks: Vec::new(),
                snapshots: Vec::new(),
                plan_log: Vec::new(),
                window_usage: Vec::new(),
                counters: OverheadCounters::default(),
                rejected_duplicates: 0,
                escalations: 0,
            },
        })
    }

    fn schedule(&mut self, time: SimTime, payload: Payload) -> Result<(), EngineError> {
        if time < self.now {
            return Err(EngineError::TimeRegression { at: time, now: self.now });
        }
        if matches!(payload, Payload::ProvisioningTick(_) | Payload::WatchdogTick) {
            self.periodic_only += 1;
        }
        self.events.push(Reverse(SimEvent {
            time,
            sequence_number: self.seq,
            payload,
        }));
        self.seq += 1;
        Ok(())
    }

    fn log(&mut self, kind: LogKind, task: Option<TaskId>, container: Option<(&ContainerRef, ContainerMode)>) {
        let entry = LogEntry {
            time_s: self.now.as_secs(),
            kind,
            task,
            container: container.map(|(c, _)| c.to_string()),
            mode: container.map(|(_, m)| m),
        };
        self.observer.on_entry(&entry, &self.memory);
    }

    fn work_remaining(&self) -> bool {
        self.arrivals_seen < self.trace_len || self.completed < self.tasks.len()
    }

    fn run(mut self, trace: &[TraceRecord]) -> Result<RunOutput, EngineError> {
        for r in trace {
            if self.repo.get(&r.function_id).is_none() {
                return Err(EngineError::UnknownFunction(r.function_id.clone()));
            }
        }
        self.trace_len = trace.len();
        // the first plan is in place before any arrival at t = 0
        if !trace.is_empty() {
            self.schedule(SimTime::ZERO, Payload::ProvisioningTick(0))?;
            self.schedule(SimTime::ZERO, Payload::WatchdogTick)?;
        }
        for (i, r) in trace.iter().enumerate() {
            self.schedule(SimTime::from_secs(r.arrival_time_s), Payload::Arrival(i))?;
        }

        let mut last = SimTime::ZERO;
        while let Some(Reverse(ev)) = self.events.pop() {
            if ev.time < last {
                return Err(EngineError::TimeRegression { at: ev.time, now: last });
            }
            last = ev.time;
            self.now = ev.time;
            match ev.payload {
                Payload::Arrival(i) => self.on_arrival(&trace[i])?,
                Payload::ContainerStarted(c) => {
                    let cm = self.containers.get(&c).map(|c| (c.cref.clone(), c.mode));
                    let task = self.containers.get(&c).and_then(|c| c.running.as_ref()).map(|r| r.outcome.task);
                    self.log(LogKind::ContainerStarted, task, cm.as_ref().map(|(r, m)| (r, *m)));
                }
                Payload::ContainerInitialized(c) => {
                    let cm = self.containers.get(&c).map(|c| (c.cref.clone(), c.mode));
                    let task = self.containers.get(&c).and_then(|c| c.running.as_ref()).map(|r| r.outcome.task);
                    self.log(LogKind::ContainerInitialized, task, cm.as_ref().map(|(r, m)| (r, *m)));
                }
                Payload::TaskCompleted(c) => self.on_completed(c)?,
                Payload::ProvisioningTick(k) => {
                    self.periodic_only -= 1;
                    self.on_tick(k)?;
                }
                Payload::WatchdogTick => {
                    self.periodic_only -= 1;
                    self.on_watchdog()?;
                }
            }
        }
        self.output.tasks = self.tasks;
        Ok(self.output)
    }

    fn on_arrival(&mut self, record: &TraceRecord) -> Result<(), EngineError> {
        self.arrivals_seen += 1;
        match self.admission.admit(record, &mut self.tasks, &mut self.queue) {
            Ok(id) => {
                self.log(LogKind::Arrival, Some(id), None);
                self.round()
            }
            Err(_) => {
                self.output.rejected_duplicates += 1;
                self.log(LogKind::Arrival, None, None);
                Ok(())
            }
        }
    }

    fn candidates(&self) -> Vec<CandidateUnit> {
        let mut out = Vec::new();
        for c in self.containers.values() {
            if c.mode != ContainerMode::Durable || c.retiring {
                continue;
            }
            let spec = self.repo.get(&c.cref.function_id).expect("containers run known functions");
            let est = self
                .estimator
                .estimate(&spec.function_id, &self.config.scheduler.unit_class)
                .unwrap_or(spec.exec_time_s);
            let mut backlog = c
                .running
                .as_ref()
                .map(|r| r.outcome.completion_time.saturating_sub(self.now).as_secs())
                .unwrap_or(0.0);
            let mut warm = c.warm || c.running.is_some();
            for _ in &c.local_queue {
                backlog += est + if warm { spec.transfer_time_s } else { spec.start_time_s + spec.init_time_s };
                warm = true;
            }
            out.push(CandidateUnit::durable(c.cref.clone(), c.local_queue.len(), backlog, warm));
        }
        for (h, host) in self.hosts.iter().enumerate() {
            let free = host.config.total_memory_mb - host.used_mb - host.pending_mb(self.repo);
            let slots = host.config.ephemeral_concurrency_cap.map(|cap| cap.saturating_sub(host.ephemeral_live));
            out.push(CandidateUnit::ephemeral_pool(h, free, slots));
        }
        out
    }

    fn round(&mut self) -> Result<(), EngineError> {
        if self.queue.is_empty() {
            return Ok(());
        }
        let mut cands = self.candidates();
        let assignments = schedule_round(
            &mut self.queue,
            &mut self.tasks,
            &mut cands,
            &self.estimator,
            self.repo,
            &self.config.scheduler,
        );
        for a in assignments {
            self.apply_assignment(a)?;
        }
        Ok(())
    }

    fn apply_assignment(&mut self, a: Assignment) -> Result<(), EngineError> {
        let seq = self.assign_seq;
        self.assign_seq += 1;
        match a.unit {
            UnitRef::EphemeralPool { host } => {
                let function = self.tasks[a.task.0 as usize].function_id.clone();
                let id = self.create_container(host, &function, ContainerMode::Ephemeral);
                self.hosts[host].ephemeral_live += 1;
                let cref = self.containers[&id].cref.clone();
                self.log(LogKind::Assign, Some(a.task), Some((&cref, ContainerMode::Ephemeral)));
                self.dispatch(id, a.task, self.now, seq)
            }
            UnitRef::Durable(cref) => {
                let id = self.container_id(&cref).expect("candidate containers exist");
                let urgent = self.tasks[a.task.0 as usize].priority == Priority::Urgent;
                let c = self.containers.get_mut(&id).expect("exists");
                let entry = QueuedTask {
                    task: a.task,
                    urgent,
                    assigned_at: self.now,
                    seq,
                };
                // urgent tasks go ahead of every non-urgent one, FCFS among themselves
                let pos = if urgent {
                    c.local_queue.iter().position(|q| !q.urgent).unwrap_or(c.local_queue.len())
                } else {
                    c.local_queue.len()
                };
                c.local_queue.insert(pos, entry);
                self.log(LogKind::Assign, Some(a.task), Some((&cref, ContainerMode::Durable)));
                self.advance_durable(id)
            }
        }
    }

    fn container_id(&self, cref: &ContainerRef) -> Option<u64> {
        self.containers.iter().find(|(_, c)| &c.cref == cref).map(|(id, _)| *id)
    }

    fn create_container(&mut self, host: usize, function: &FunctionId, mode: ContainerMode) -> u64 {
        let used: BTreeSet<u32> = self
            .containers
            .values()
            .filter(|c| c.cref.host == host && &c.cref.function_id == function)
            .map(|c| c.cref.instance_index)
            .collect();
        let index = (1..).find(|j| !used.contains(j)).expect("free index");
        let spec = self.repo.get(function).expect("known function");
        let id = self.next_container;
        self.next_container += 1;
        self.containers.insert(
            id,
            Container {
                cref: ContainerRef {
                    host,
                    function_id: function.clone(),
                    instance_index: index,
                },
                mode,
                warm: false,
                retiring: false,
                local_queue: VecDeque::new(),
                running: None,
            },
        );
        self.hosts[host].used_mb += spec.memory_mb;
        self.memory[host].used_mb = self.hosts[host].used_mb;
        self.hosts[host].monitor.instance_up(function);
        id
    }

    fn destroy_container(&mut self, id: u64) {
        let c = self.containers.remove(&id).expect("exists");
        let spec = self.repo.get(&c.cref.function_id).expect("known function");
        let host = &mut self.hosts[c.cref.host];
        host.used_mb -= spec.memory_mb;
        if host.used_mb.abs() < 1e-9 {
            host.used_mb = 0.0;
        }
        host.monitor.instance_down(&c.cref.function_id);
        if c.mode == ContainerMode::Ephemeral {
            host.ephemeral_live -= 1;
        }
        self.memory[c.cref.host].used_mb = host.used_mb;
        if c.mode == ContainerMode::Durable {
            self.log(LogKind::Retire, None, Some((&c.cref, c.mode)));
        }
    }

    /// Starts the next queued task on an idle durable container.
    fn advance_durable(&mut self, id: u64) -> Result<(), EngineError> {
        let c = &self.containers[&id];
        if c.running.is_some() {
            return Ok(());
        }
        let Some(next) = self.containers.get_mut(&id).and_then(|c| c.local_queue.pop_front()) else {
            return Ok(());
        };
        self.dispatch(id, next.task, next.assigned_at, next.seq)
    }

    fn dispatch(&mut self, id: u64, task_id: TaskId, assigned_at: SimTime, seq: u64) -> Result<(), EngineError> {
        let (cref, mode, warm) = {
            let c = &self.containers[&id];
            (c.cref.clone(), c.mode, c.warm)
        };
        let spec = self.repo.get(&cref.function_id).expect("known function");
        let host = cref.host;
        let exec_s = sample_exec_time(spec, self.config.jitter_fraction, &mut self.hosts[host].rng);
        let task = &mut self.tasks[task_id.0 as usize];
        task.advance(TaskState::Running)?;
        let mut out = match mode {
            ContainerMode::Ephemeral => execute_on_ephemeral(task, spec, self.now, exec_s, cref.clone()),
            ContainerMode::Durable => execute_on_durable(task, &cref, warm, spec, self.now, exec_s)?,
        };
        out.assigned_at = assigned_at;
        out.assign_seq = seq;
        let started = self.now + out.start_overhead;
        let initialized = started + out.init_overhead;
        let completion = out.completion_time;
        let cold = mode == ContainerMode::Ephemeral || !warm;
        self.hosts[host].monitor.add_trigger(&cref.function_id, cref.instance_index);
        let c = self.containers.get_mut(&id).expect("exists");
        c.warm = true;
        c.running = Some(RunningTask {
            outcome: out,
            accounted_until: self.now,
        });
        self.log(LogKind::Dispatch, Some(task_id), Some((&cref, mode)));
        if cold {
            self.schedule(started, Payload::ContainerStarted(id))?;
            if mode == ContainerMode::Durable && !warm {
                self.schedule(initialized, Payload::ContainerInitialized(id))?;
            }
        }
        self.schedule(completion, Payload::TaskCompleted(id))
    }

    fn credit_busy(&mut self, id: u64, until: SimTime) {
        let c = self.containers.get_mut(&id).expect("exists");
        let Some(r) = c.running.as_mut() else {
            return;
        };
        let from = r.outcome.exec_start().max(r.accounted_until);
        if until > from {
            let secs = (until - from).as_secs();
            self.hosts[c.cref.host].monitor.add_busy(&c.cref.function_id, c.cref.instance_index, secs);
        }
        r.accounted_until = r.accounted_until.max(until);
    }

    fn on_completed(&mut self, id: u64) -> Result<(), EngineError> {
        self.credit_busy(id, self.now);
        let running = self.containers.get_mut(&id).and_then(|c| c.running.take()).expect("completion for a running container");
        let out = running.outcome;
        debug_assert_eq!(out.completion_time, self.now);
        let task = &mut self.tasks[out.task.0 as usize];
        task.complete(self.now)?;
        self.admission.release(task);
        self.completed += 1;

        let c = &self.containers[&id];
        let cref = c.cref.clone();
        let mode = c.mode;
        let host = cref.host;
        let turnaround = (out.completion_time - out.dispatch_time).as_secs();
        match mode {
            ContainerMode::Ephemeral => self.hosts[host].monitor.record_ephemeral_turnaround(&cref.function_id, turnaround),
            ContainerMode::Durable if out.init_overhead == SimTime::ZERO => {
                self.hosts[host].monitor.record_warm_turnaround(&cref.function_id, turnaround)
            }
            ContainerMode::Durable => {}
        }
        if out.exec > SimTime::ZERO {
            // measured execution feeds the learning-mode estimator
            let _ = self.estimator.observe(&cref.function_id, &self.config.scheduler.unit_class, out.exec.as_secs());
        }
        self.output.counters.start_s += out.start_overhead.as_secs();
        self.output.counters.init_s += out.init_overhead.as_secs();
        self.output.counters.transfer_s += out.transfer.as_secs();
        self.log(LogKind::TaskCompleted, Some(out.task), Some((&cref, mode)));
        self.output.outcomes.push(out);

        match mode {
            ContainerMode::Ephemeral => self.destroy_container(id),
            ContainerMode::Durable => {
                let c = &self.containers[&id];
                if c.local_queue.is_empty() && c.retiring {
                    self.destroy_container(id);
                } else {
                    self.advance_durable(id)?;
                }
            }
        }
        self.launch_pending(host);
        self.round()
    }

    fn launch_pending(&mut self, host: usize) {
        while let Some(f) = self.hosts[host].pending_launches.front().cloned() {
            let need = self.repo.get(&f).expect("known function").memory_mb;
            let h = &self.hosts[host];
            if h.config.total_memory_mb - h.used_mb < need {
                break;
            }
            self.hosts[host].pending_launches.pop_front();
            let id = self.create_container(host, &f, ContainerMode::Durable);
            let cref = self.containers[&id].cref.clone();
            self.log(LogKind::Launch, None, Some((&cref, ContainerMode::Durable)));
        }
    }

    /// Brings the durable population of `host` in line with `plan`.
    fn apply_plan(&mut self, host: usize, plan: &ProvisioningPlan) -> Result<ContainerDelta, EngineError> {
        let total = self.hosts[host].config.total_memory_mb;
        let mut needed = 0.0;
        for (f, n) in &plan.allocations {
            let spec = self.repo.get(f).ok_or_else(|| EngineError::UnknownFunction(f.clone()))?;
            needed += spec.memory_mb * f64::from(*n);
        }
        if needed > total || plan.allocated_memory_mb > total {
            return Err(EngineError::PlanExceedsMemory {
                host,
                needed_mb: needed.max(plan.allocated_memory_mb),
                total_mb: total,
            });
        }
        let mut delta = ContainerDelta::default();
        let mut functions: BTreeSet<FunctionId> = plan.allocations.keys().cloned().collect();
        functions.extend(
            self.containers
                .values()
                .filter(|c| c.cref.host == host && c.mode == ContainerMode::Durable)
                .map(|c| c.cref.function_id.clone()),
        );
        functions.extend(self.hosts[host].pending_launches.iter().cloned());

        for f in functions {
            let target = plan.count(&f) as usize;
            let mut durable: Vec<(u64, bool, bool, u32)> = self
                .containers
                .iter()
                .filter(|(_, c)| c.cref.host == host && c.mode == ContainerMode::Durable && c.cref.function_id == f)
                .map(|(id, c)| (*id, c.retiring, c.idle(), c.cref.instance_index))
                .collect();
            // highest index first when shrinking
            durable.sort_by_key(|d| Reverse(d.3));
            let pending = self.hosts[host].pending_launches.iter().filter(|p| **p == f).count();
            let active = durable.iter().filter(|d| !d.1).count() + pending;

            if target > active {
                let mut missing = target - active;
                for d in durable.iter().filter(|d| d.1).rev() {
                    if missing == 0 {
                        break;
                    }
                    let c = self.containers.get_mut(&d.0).expect("exists");
                    c.retiring = false;
                    delta.resumed.push(c.cref.clone());
                    missing -= 1;
                }
                for _ in 0..missing {
                    self.hosts[host].pending_launches.push_back(f.clone());
                    delta.queued_launches.push(f.clone());
                }
            } else if target < active {
                let mut excess = active - target;
                while excess > 0 {
                    let Some(pos) = self.hosts[host].pending_launches.iter().rposition(|p| *p == f) else {
                        break;
                    };
                    self.hosts[host].pending_launches.remove(pos);
                    delta.cancelled_launches.push(f.clone());
                    excess -= 1;
                }
                let live: Vec<_> = durable.iter().filter(|d| !d.1).collect();
                for d in live.iter().filter(|d| d.2) {
                    if excess == 0 {
                        break;
                    }
                    delta.retired.push(self.containers[&d.0].cref.clone());
                    self.destroy_container(d.0);
                    excess -= 1;
                }
                for d in live.iter().filter(|d| !d.2) {
                    if excess == 0 {
                        break;
                    }
                    let c = self.containers.get_mut(&d.0).expect("exists");
                    c.retiring = true;
                    delta.draining.push(c.cref.clone());
                    excess -= 1;
                }
            }
        }
        let before: BTreeSet<ContainerRef> = self.containers.values().map(|c| c.cref.clone()).collect();
        self.launch_pending(host);
        for c in self.containers.values() {
            if !before.contains(&c.cref) {
                delta.launched.push(c.cref.clone());
            }
        }
        delta.queued_launches.retain(|f| !delta.launched.iter().any(|c| &c.function_id == f));
        self.hosts[host].plan = plan.clone();
        Ok(delta)
    }

    fn on_tick(&mut self, k: u64) -> Result<(), EngineError> {
        self.log(LogKind::ProvisioningTick, None, None);
        let period = self.config.provisioning_period_s;
        let running: Vec<u64> = self.containers.iter().filter(|(_, c)| c.running.is_some()).map(|(id, _)| *id).collect();
        for id in running {
            self.credit_busy(id, self.now);
        }
        for h in 0..self.hosts.len() {
            let snapshot = if k == 0 {
                MonitorSnapshot::default()
            } else {
                let live: Vec<(FunctionId, u32)> = self
                    .containers
                    .values()
                    .filter(|c| c.cref.host == h)
                    .map(|c| (c.cref.function_id.clone(), c.cref.instance_index))
                    .collect();
                let len = (self.now - self.hosts[h].window_start).as_secs();
                let s = self.hosts[h].monitor.snapshot_window(k - 1, len, &live);
                self.output.snapshots.push((h, s.clone()));
                s
            };
            self.hosts[h].window_start = self.now;

            let deltas: BTreeMap<FunctionId, f64> = self
                .repo
                .specs()
                .iter()
                .map(|s| {
                    let d = match self.config.delta_mode {
                        DeltaMode::Analytic => compute_delta(s),
                        DeltaMode::Empirical => self.hosts[h].monitor.empirical_delta(&s.function_id).unwrap_or_else(|| compute_delta(s)),
                    };
                    (s.function_id.clone(), d)
                })
                .collect();
            let total = self.hosts[h].config.total_memory_mb;
            let mut allocation = policy_plan(self.policy, &snapshot, self.repo, total, self.config.allocation_loop, &deltas)?;
            allocation.plan.produced_at_window = k;
            let applied = match self.apply_plan(h, &allocation.plan) {
                Ok(_) => true,
                Err(EngineError::PlanExceedsMemory { .. }) => false,
                Err(e) => return Err(e),
            };
            self.output.plan_log.push(PlanLogEntry {
                window_id: k,
                time_s: self.now.as_secs(),
                host: h,
                policy: self.policy.name().to_owned(),
                allocations: allocation.plan.allocations.clone(),
                allocated_memory_mb: allocation.plan.allocated_memory_mb,
                reserved_memory_mb: allocation.plan.reserved_memory_mb,
                selections: allocation.selections,
                applied,
            });
            let used = self.hosts[h].used_mb;
            self.output.window_usage.push(WindowUsage {
                window_id: k,
                host: h,
                time_s: self.now.as_secs(),
                memory_utilization: used / total,
            });
        }
        self.round()?;

        if self.work_remaining() {
            self.check_stall()?;
            let next = SimTime::from_secs((k + 1) as f64 * period);
            self.schedule(next.max(self.now), Payload::ProvisioningTick(k + 1))?;
        }
        Ok(())
    }

    fn check_stall(&mut self) -> Result<(), EngineError> {
        let busy = self.containers.values().any(|c| c.running.is_some());
        let only_periodic = self.events.len() == self.periodic_only;
        if !busy && only_periodic && !self.queue.is_empty() {
            self.idle_ticks += 1;
            if self.idle_ticks > self.config.alpha + 2 {
                return Err(EngineError::Stalled {
                    queued: self.queue.len(),
                    at: self.now,
                });
            }
        } else {
            self.idle_ticks = 0;
        }
        Ok(())
    }

    fn on_watchdog(&mut self) -> Result<(), EngineError> {
        let escalated = watchdog_scan(self.now, &mut self.tasks, &mut self.queue, self.config.scheduler.resend_lead_s);
        self.output.escalations += escalated.len();
        for id in escalated {
            self.log(LogKind::Escalate, Some(id), None);
        }
        if self.work_remaining() {
            let next = self.now + SimTime::from_secs(self.config.scheduler.watchdog_period_s);
            self.schedule(next, Payload::WatchdogTick)?;
        }
        Ok(())
    }
}
