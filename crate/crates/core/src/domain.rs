//! Core data model: streams, tasks, functions, containers, monitor snapshots
//! and provisioning plans.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in integer microseconds.
///
/// All engine arithmetic happens in this domain so that turnaround
/// decompositions and replays are exact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    /// Rounds a non-negative number of seconds to the nearest microsecond.
    pub fn from_secs(secs: f64) -> SimTime {
        debug_assert!(secs >= 0.0 && secs.is_finite(), "bad time {secs}");
        SimTime((secs.max(0.0) * 1e6).round() as u64)
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs())
    }
}

/// Identifier of a function in the service repository.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(pub String);

impl FunctionId {
    pub fn new(id: impl Into<String>) -> Self {
        FunctionId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FunctionId {
    fn from(s: &str) -> Self {
        FunctionId(s.to_owned())
    }
}

/// Opaque stream identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub String);

impl StreamId {
    pub fn new(id: impl Into<String>) -> Self {
        StreamId(id.into())
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Index of an admitted task in the engine's task table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("segment index {index} out of range for stream with {count} segments")]
    SegmentOutOfRange { index: u32, count: u32 },
    #[error("invalid stream request: {0}")]
    InvalidRequest(&'static str),
    #[error("illegal task transition {from:?} -> {to:?} for {task}")]
    IllegalTransition {
        task: TaskId,
        from: TaskState,
        to: TaskState,
    },
}

/// A viewer's request for a run of consecutive segments of one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRequest {
    pub stream_id: StreamId,
    pub request_time: f64,
    pub segment_count: u32,
    pub function_id: FunctionId,
    #[serde(default = "default_segment_duration")]
    pub segment_duration: f64,
}

fn default_segment_duration() -> f64 {
    2.0
}

impl StreamRequest {
    pub fn new(
        stream_id: StreamId,
        request_time: f64,
        segment_count: u32,
        function_id: FunctionId,
    ) -> Result<Self, DomainError> {
        let req = StreamRequest {
            stream_id,
            request_time,
            segment_count,
            function_id,
            segment_duration: default_segment_duration(),
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.segment_count == 0 {
            return Err(DomainError::InvalidRequest("segment_count must be >= 1"));
        }
        if !(self.segment_duration > 0.0) {
            return Err(DomainError::InvalidRequest("segment_duration must be > 0"));
        }
        Ok(())
    }
}

/// Presentation-time deadline of segment `segment_index` of `request`.
pub fn derive_deadline(
    request: &StreamRequest,
    segment_index: u32,
    startup_allowance_s: f64,
) -> Result<f64, DomainError> {
    if segment_index >= request.segment_count {
        return Err(DomainError::SegmentOutOfRange {
            index: segment_index,
            count: request.segment_count,
        });
    }
    Ok(request.request_time
        + startup_allowance_s
        + f64::from(segment_index) * request.segment_duration)
}

/// Task priority. The derived ordering is `Normal < High < Urgent`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    Normal,
    High,
    Urgent,
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Priority::Normal => "normal",
            Priority::High => "high",
            Priority::Urgent => "urgent",
        })
    }
}

pub fn task_priority(segment_index: u32, urgent_flag: bool, high_priority_prefix: u32) -> Priority {
    if urgent_flag {
        Priority::Urgent
    } else if segment_index < high_priority_prefix {
        Priority::High
    } else {
        Priority::Normal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskState {
    Unmapped,
    Pending,
    Running,
    Completed,
}

impl TaskState {
    pub fn next(self) -> Option<TaskState> {
        match self {
            TaskState::Unmapped => Some(TaskState::Pending),
            TaskState::Pending => Some(TaskState::Running),
            TaskState::Running => Some(TaskState::Completed),
            TaskState::Completed => None,
        }
    }
}

/// One (segment, function) pair moving through the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: TaskId,
    pub stream_id: StreamId,
    pub segment_index: u32,
    pub function_id: FunctionId,
    pub arrival_time: SimTime,
    pub deadline: SimTime,
    pub priority: Priority,
    state: TaskState,
    completion_time: Option<SimTime>,
    pub missed: bool,
}

impl Task {
    pub fn new(
        id: TaskId,
        stream_id: StreamId,
        segment_index: u32,
        function_id: FunctionId,
        arrival_time: SimTime,
        deadline: SimTime,
        priority: Priority,
    ) -> Self {
        Task {
            id,
            stream_id,
            segment_index,
            function_id,
            arrival_time,
            deadline: deadline.max(arrival_time),
            priority,
            state: TaskState::Unmapped,
            completion_time: None,
            missed: false,
        }
    }

    pub fn state(&self) -> TaskState {
        self.state
    }

    pub fn completion_time(&self) -> Option<SimTime> {
        self.completion_time
    }

    /// Moves the task one step along the lifecycle. Only the immediate
    /// successor state is accepted.
    pub fn advance(&mut self, to: TaskState) -> Result<(), DomainError> {
        if self.state.next() != Some(to) {
            return Err(DomainError::IllegalTransition {
                task: self.id,
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    pub fn complete(&mut self, at: SimTime) -> Result<(), DomainError> {
        self.advance(TaskState::Completed)?;
        self.completion_time = Some(at);
        self.missed = at > self.deadline;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

/// A service-repository entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub function_id: FunctionId,
    pub memory_mb: f64,
    pub exec_time_s: f64,
    pub start_time_s: f64,
    pub init_time_s: f64,
    pub transfer_time_s: f64,
    pub size_class: SizeClass,
}

impl FunctionSpec {
    pub fn validate(&self, transfer_range: (f64, f64)) -> Result<(), String> {
        let id = &self.function_id;
        if !(self.memory_mb > 0.0) {
            return Err(format!("function {id}: memory_mb must be > 0"));
        }
        for (name, v) in [
            ("exec_time_s", self.exec_time_s),
            ("start_time_s", self.start_time_s),
            ("init_time_s", self.init_time_s),
            ("transfer_time_s", self.transfer_time_s),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(format!("function {id}: {name} must be >= 0"));
            }
        }
        if self.transfer_time_s < transfer_range.0 || self.transfer_time_s > transfer_range.1 {
            return Err(format!(
                "function {id}: transfer_time_s {} outside [{}, {}]",
                self.transfer_time_s, transfer_range.0, transfer_range.1
            ));
        }
        Ok(())
    }
}

/// Default bounds for per-task segment transfer latency.
pub const DEFAULT_TRANSFER_RANGE: (f64, f64) = (0.006, 0.030);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerMode {
    Durable,
    Ephemeral,
}

/// Stable handle to a container slot `f_ij` on a host.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContainerRef {
    pub host: usize,
    pub function_id: FunctionId,
    pub instance_index: u32,
}

impl fmt::Display for ContainerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}/{}#{}", self.host, self.function_id, self.instance_index)
    }
}

/// Per-container monitoring record for one closed window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerRecord {
    pub function_id: FunctionId,
    pub instance_index: u32,
    pub utilization: f64,
    pub trigger_count: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorSnapshot {
    pub window_id: u64,
    pub records: Vec<ContainerRecord>,
    /// Max coexisting instances per function over the last α windows.
    pub max_concurrency: BTreeMap<FunctionId, u32>,
}

impl MonitorSnapshot {
    pub fn record(&self, function_id: &FunctionId, instance_index: u32) -> Option<&ContainerRecord> {
        self.records
            .iter()
            .find(|r| &r.function_id == function_id && r.instance_index == instance_index)
    }
}

/// Output of a provisioning round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProvisioningPlan {
    pub allocations: BTreeMap<FunctionId, u32>,
    pub allocated_memory_mb: f64,
    pub reserved_memory_mb: f64,
    pub produced_at_window: u64,
}

impl ProvisioningPlan {
    pub fn count(&self, function_id: &FunctionId) -> u32 {
        self.allocations.get(function_id).copied().unwrap_or(0)
    }

    pub fn total_instances(&self) -> u32 {
        self.allocations.values().sum()
    }
}

/// Ordered service repository. Order is significant: it is the popularity
/// rank used by the workload generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Repository {
    specs: Vec<FunctionSpec>,
}

impl Repository {
    pub fn new(specs: Vec<FunctionSpec>) -> Result<Self, String> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &specs {
            if !seen.insert(s.function_id.clone()) {
                return Err(format!("duplicate function id {}", s.function_id));
            }
        }
        Ok(Repository { specs })
    }

    pub fn get(&self, id: &FunctionId) -> Option<&FunctionSpec> {
        self.specs.iter().find(|s| &s.function_id == id)
    }

    pub fn specs(&self) -> &[FunctionSpec] {
        &self.specs
    }

    pub fn ids(&self) -> Vec<FunctionId> {
        self.specs.iter().map(|s| s.function_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn total_memory_mb(&self) -> f64 {
        self.specs.iter().map(|s| s.memory_mb).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(t: f64, count: u32) -> StreamRequest {
        StreamRequest::new(StreamId::new("s"), t, count, "f01".into()).unwrap()
    }

    #[test]
    fn deadline_examples() {
        assert_eq!(derive_deadline(&req(0.0, 10), 0, 5.0).unwrap(), 5.0);
        assert_eq!(derive_deadline(&req(0.0, 10), 3, 5.0).unwrap(), 11.0);
        assert_eq!(derive_deadline(&req(100.0, 1), 0, 0.0).unwrap(), 100.0);
    }

    #[test]
    fn deadline_out_of_range() {
        assert_eq!(
            derive_deadline(&req(0.0, 3), 3, 5.0),
            Err(DomainError::SegmentOutOfRange { index: 3, count: 3 })
        );
    }

    #[test]
    fn deadline_monotone_in_segment() {
        let r = req(7.0, 50);
        let ds: Vec<f64> = (0..50).map(|y| derive_deadline(&r, y, 5.0).unwrap()).collect();
        assert!(ds.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn request_validation() {
        assert!(StreamRequest::new(StreamId::new("s"), 0.0, 0, "f".into()).is_err());
        let mut r = req(0.0, 1);
        r.segment_duration = 0.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn priority_examples() {
        assert_eq!(task_priority(0, false, 3), Priority::High);
        assert_eq!(task_priority(7, false, 3), Priority::Normal);
        assert_eq!(task_priority(7, true, 3), Priority::Urgent);
        assert_eq!(task_priority(0, false, 0), Priority::Normal);
    }

    #[test]
    fn priority_order_is_total() {
        assert!(Priority::Urgent > Priority::High);
        assert!(Priority::High > Priority::Normal);
    }

    #[test]
    fn lifecycle_rejects_skips_and_reversals() {
        let mut t = Task::new(
            TaskId(1),
            StreamId::new("s"),
            0,
            "f".into(),
            SimTime::ZERO,
            SimTime::from_secs(5.0),
            Priority::High,
        );
        assert!(t.advance(TaskState::Running).is_err());
        t.advance(TaskState::Pending).unwrap();
        assert!(t.advance(TaskState::Unmapped).is_err());
        t.advance(TaskState::Running).unwrap();
        assert!(t.completion_time().is_none());
        t.complete(SimTime::from_secs(6.0)).unwrap();
        assert!(t.missed);
        assert_eq!(t.completion_time(), Some(SimTime::from_secs(6.0)));
        assert!(t.advance(TaskState::Completed).is_err());
    }

    #[test]
    fn simtime_roundtrip() {
        assert_eq!(SimTime::from_secs(7.5).0, 7_500_000);
        assert_eq!(SimTime::from_secs(0.02).as_secs(), 0.02);
    }
}
