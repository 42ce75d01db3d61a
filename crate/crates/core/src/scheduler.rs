//! Admission control, the shared task queue, the mapping round and the
//! stream-manager watchdog.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{task_priority, ContainerRef, FunctionId, Priority, Repository, SimTime, StreamId, Task, TaskId, TaskState};
use crate::estimator::{EstimationMatrix, UnitClass};
use crate::workload::TraceRecord;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("duplicate task ({0}, {1}, {2}) is still live")]
    Duplicate(StreamId, u32, FunctionId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// A durable container with this many queued tasks takes no more.
    pub oversubscription_threshold: usize,
    pub high_priority_prefix: u32,
    pub resend_lead_s: f64,
    pub watchdog_period_s: f64,
    pub unit_class: UnitClass,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            oversubscription_threshold: 5,
            high_priority_prefix: 3,
            resend_lead_s: 2.0,
            watchdog_period_s: 1.0,
            unit_class: UnitClass::default(),
        }
    }
}

/// Dequeue order: priority descending, then deadline, arrival, stream,
/// segment; the task id makes keys unique.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct QueueKey {
    pub priority: Reverse<Priority>,
    pub deadline: SimTime,
    pub arrival: SimTime,
    pub stream_id: StreamId,
    pub segment_index: u32,
    pub task: TaskId,
}

impl QueueKey {
    pub fn of(task: &Task) -> Self {
        QueueKey {
            priority: Reverse(task.priority),
            deadline: task.deadline,
            arrival: task.arrival_time,
            stream_id: task.stream_id.clone(),
            segment_index: task.segment_index,
            task: task.id,
        }
    }
}

/// Holds only Unmapped tasks, in dequeue order.
#[derive(Clone, Debug, Default)]
pub struct SharedTaskQueue {
    keys: BTreeSet<QueueKey>,
    by_task: BTreeMap<TaskId, QueueKey>,
}

impl SharedTaskQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, task: &Task) {
        debug_assert_eq!(task.state(), TaskState::Unmapped);
        let key = QueueKey::of(task);
        if let Some(old) = self.by_task.insert(task.id, key.clone()) {
            self.keys.remove(&old);
        }
        self.keys.insert(key);
    }

    pub fn remove(&mut self, task: TaskId) -> bool {
        match self.by_task.remove(&task) {
            Some(key) => self.keys.remove(&key),
            None => false,
        }
    }

    pub fn contains(&self, task: TaskId) -> bool {
        self.by_task.contains_key(&task)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Task ids in dequeue order.
    pub fn ordered(&self) -> Vec<TaskId> {
        self.keys.iter().map(|k| k.task).collect()
    }
}

/// Turns trace records into queued tasks and rejects live duplicates.
#[derive(Clone, Debug, Default)]
pub struct Admission {
    live: BTreeSet<(StreamId, u32, FunctionId)>,
    high_priority_prefix: u32,
}

impl Admission {
    pub fn new(high_priority_prefix: u32) -> Self {
        Admission {
            live: BTreeSet::new(),
            high_priority_prefix,
        }
    }

    /// Admits `record` as the next entry of `tasks`. A record already
    /// carrying `urgent` (a resend) keeps that priority.
    pub fn admit(&mut self, record: &TraceRecord, tasks: &mut Vec<Task>, queue: &mut SharedTaskQueue) -> Result<TaskId, SchedulerError> {
        let key = (record.stream_id.clone(), record.segment_index, record.function_id.clone());
        if self.live.contains(&key) {
            return Err(SchedulerError::Duplicate(key.0, key.1, key.2));
        }
        let id = TaskId(tasks.len() as u64);
        let priority = task_priority(record.segment_index, record.priority == Priority::Urgent, self.high_priority_prefix);
        let task = Task::new(
            id,
            record.stream_id.clone(),
            record.segment_index,
            record.function_id.clone(),
            SimTime::from_secs(record.arrival_time_s),
            SimTime::from_secs(record.deadline_s),
            priority,
        );
        queue.push(&task);
        tasks.push(task);
        self.live.insert(key);
        Ok(id)
    }

    pub fn release(&mut self, task: &Task) {
        self.live.remove(&(task.stream_id.clone(), task.segment_index, task.function_id.clone()));
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnitRef {
    Durable(ContainerRef),
    EphemeralPool { host: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Capability {
    Function(FunctionId),
    Any,
}

/// A potential target for one task, as seen at the start of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateUnit {
    pub unit: UnitRef,
    pub capability: Capability,
    pub queue_length: usize,
    /// Seconds from now until the unit could begin a newly queued task.
    pub estimated_completion_s: f64,
    /// Durable only: the container already paid its start and init.
    pub warm: bool,
    /// Ephemeral pool only: memory not held by live or pending containers.
    pub free_memory_mb: f64,
    /// Ephemeral pool only: remaining concurrency, if capped.
    pub slots_left: Option<usize>,
}

impl CandidateUnit {
    pub fn durable(container: ContainerRef, queue_length: usize, backlog_s: f64, warm: bool) -> Self {
        CandidateUnit {
            capability: Capability::Function(container.function_id.clone()),
            unit: UnitRef::Durable(container),
            queue_length,
            estimated_completion_s: backlog_s,
            warm,
            free_memory_mb: 0.0,
            slots_left: None,
        }
    }

    pub fn ephemeral_pool(host: usize, free_memory_mb: f64, slots_left: Option<usize>) -> Self {
        CandidateUnit {
            unit: UnitRef::EphemeralPool { host },
            capability: Capability::Any,
            queue_length: 0,
            estimated_completion_s: 0.0,
            warm: false,
            free_memory_mb,
            slots_left,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub task: TaskId,
    pub unit: UnitRef,
    pub estimated_completion_s: f64,
}

/// Maps queued tasks onto candidates, in queue order.
///
/// Each task goes to the eligible candidate with the smallest estimated
/// completion: a durable container of its function whose queue is below the
/// oversubscription threshold, or an ephemeral pool with room for one more
/// container. Tasks with no eligible candidate stay queued.
pub fn schedule_round(
    queue: &mut SharedTaskQueue,
    tasks: &mut [Task],
    candidates: &mut [CandidateUnit],
    estimator: &EstimationMatrix,
    repository: &Repository,
    config: &SchedulerConfig,
) -> Vec<Assignment> {
    let mut out = Vec::new();
    let min_memory = repository.specs().iter().map(|s| s.memory_mb).fold(f64::INFINITY, f64::min);
    for id in queue.ordered() {
        if !has_capacity(candidates, min_memory, config) {
            break;
        }
        let task = &mut tasks[id.0 as usize];
        let Some(spec) = repository.get(&task.function_id) else {
            continue;
        };
        let est = estimator.estimate(&task.function_id, &config.unit_class).unwrap_or(spec.exec_time_s);
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in candidates.iter().enumerate() {
            let cost = match (&c.unit, &c.capability) {
                (UnitRef::Durable(_), Capability::Function(f)) => {
                    if f != &task.function_id || c.queue_length >= config.oversubscription_threshold {
                        continue;
                    }
                    let overhead = if c.warm {
                        spec.transfer_time_s
                    } else {
                        spec.start_time_s + spec.init_time_s
                    };
                    c.estimated_completion_s + overhead + est
                }
                (UnitRef::EphemeralPool { .. }, _) => {
                    if c.free_memory_mb < spec.memory_mb || c.slots_left == Some(0) {
                        continue;
                    }
                    spec.start_time_s + est
                }
                (UnitRef::Durable(_), Capability::Any) => continue,
            };
            if best.is_none_or(|(_, b)| cost < b) {
                best = Some((i, cost));
            }
        }
        let Some((i, cost)) = best else {
            continue;
        };
        let c = &mut candidates[i];
        match c.unit {
            UnitRef::Durable(_) => {
                c.queue_length += 1;
                c.estimated_completion_s = cost;
                c.warm = true;
            }
            UnitRef::EphemeralPool { .. } => {
                c.free_memory_mb -= spec.memory_mb;
                if let Some(s) = &mut c.slots_left {
                    *s -= 1;
                }
            }
        }
        task.advance(TaskState::Pending).expect("queued tasks are unmapped");
        queue.remove(id);
        out.push(Assignment {
            task: id,
            unit: c.unit.clone(),
            estimated_completion_s: cost,
        });
    }
    out
}

fn has_capacity(candidates: &[CandidateUnit], min_memory: f64, config: &SchedulerConfig) -> bool {
    candidates.iter().any(|c| match c.unit {
        UnitRef::Durable(_) => c.queue_length < config.oversubscription_threshold,
        UnitRef::EphemeralPool { .. } => c.free_memory_mb >= min_memory && c.slots_left != Some(0),
    })
}

/// Escalates queued tasks about to miss their deadline to Urgent, once.
/// Returns the escalated ids.
pub fn watchdog_scan(now: SimTime, tasks: &mut [Task], queue: &mut SharedTaskQueue, resend_lead_s: f64) -> Vec<TaskId> {
    let lead = SimTime::from_secs(resend_lead_s.max(0.0));
    let mut escalated = Vec::new();
    for id in queue.ordered() {
        let task = &mut tasks[id.0 as usize];
        if task.state() != TaskState::Unmapped || task.priority == Priority::Urgent {
            continue;
        }
        // deadline - now < lead, without underflow
        if task.deadline < now + lead {
            task.priority = Priority::Urgent;
            queue.push(task);
            escalated.push(id);
        }
    }
    escalated
}
