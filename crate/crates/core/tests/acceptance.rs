//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smse_core::config::{default_functions, ExperimentConfig};
use smse_core::domain::{ContainerMode, FunctionId, FunctionSpec, Priority, Repository, SimTime, SizeClass, StreamId, TaskState};
use smse_core::engine::{run, EngineConfig, HostConfig, HostMemory, LogEntry, LogKind, NullObserver, RunObserver};
use smse_core::estimator::EstimationMatrix;
use smse_core::experiment::{cmd_compare, run_comparison};
use smse_core::provisioner::{allocate, AllocationLoop, CandidateScore, PolicyKind};
use smse_core::workload::{generate_trace, Phase, TraceRecord, WorkloadConfig};

// Tolerances and budgets.
const DECIMAL_REL_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: usize = 1000;
const MIN_GAIN_AT_1200: f64 = 0.15;
const RATE_RATIO_RANGE: (f64, f64) = (1.8, 2.2);
const DURATION_RATIO_TOL: f64 = 0.10;
const ENGINE_CASES: u32 = 128;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// 1. scoring equations

/// Relative decimal comparison for hand-written expected values.
fn near(actual: f64, expected: f64) -> bool {
    (actual - expected).abs() <= DECIMAL_REL_TOL * expected.abs().max(1.0)
}

fn criterion_equations() -> Outcome {
    // (μ, U, M, δ) and hand-computed (B, M_r, C, BCR)
    let cases = [
        (10u32, 0.95, 1024.0, 0.5, 5.0, 972.8, 51.2, 5.0 / 51.2),
        (2u32, 0.2, 1024.0, 0.5, 1.0, 204.8, 819.2, 1.0 / 819.2),
        (10u32, 0.95, 384.0, 0.98, 9.8, 364.8, 19.2, 9.8 / 19.2),
        (2u32, 0.2, 384.0, 0.98, 1.96, 76.8, 307.2, 1.96 / 307.2),
    ];
    for (mu, u, m, d, b, mr, c, bcr) in cases {
        let s = CandidateScore::new("f".into(), 1, u, mu, d, m);
        // IEEE-754 double evaluation of the defining formulas, one rounding per operation
        let b_ieee = f64::from(mu) * d;
        let mr_ieee = m * u;
        let c_ieee = m - mr_ieee;
        let bcr_ieee = b_ieee / c_ieee;
        for (name, got, want) in [
            ("B", s.benefit, b_ieee),
            ("M_r", s.reserved_mb, mr_ieee),
            ("C", s.cost, c_ieee),
            ("BCR", s.bcr, bcr_ieee),
        ] {
            check(got.to_bits() == want.to_bits(), format!("{name} for μ={mu} U={u}: {got:e} != {want:e}"))?;
        }
        for (name, got, want) in [("B", s.benefit, b), ("M_r", s.reserved_mb, mr), ("C", s.cost, c), ("BCR", s.bcr, bcr)] {
            check(near(got, want), format!("{name} for μ={mu} U={u}: {got} vs hand value {want}"))?;
        }
    }
    let full = CandidateScore::new("f".into(), 1, 1.0, 3, 0.5, 512.0);
    check(full.cost == 0.0 && full.bcr == f64::INFINITY, "U=1 must give C=0 and an unbounded ratio")?;
    let idle = CandidateScore::new("f".into(), 1, 1.0, 0, 0.5, 512.0);
    check(idle.bcr == 0.0, "B=0 must give ratio 0")?;
    Ok("μ=10,U=0.95 and μ=2,U=0.2 bitwise equal to IEEE evaluation, within 1e-12 of decimal".into())
}

// ---------------------------------------------------------------------------
// 2. greedy allocation vs a naive re-scanning reference

#[derive(Clone, Debug)]
struct RefCand {
    f: String,
    j: u32,
    mu: u32,
    u: f64,
    delta: f64,
    m: f64,
}

impl RefCand {
    fn b(&self) -> f64 {
        f64::from(self.mu) * self.delta
    }
    fn mr(&self) -> f64 {
        self.m * self.u
    }
    fn c(&self) -> f64 {
        self.m - self.mr()
    }
    /// None encodes the unbounded ratio.
    fn ratio(&self) -> Option<f64> {
        if self.b() == 0.0 {
            Some(0.0)
        } else if self.c() == 0.0 {
            None
        } else {
            Some(self.b() / self.c())
        }
    }
    /// Documented tie-break: unbounded first (larger B first), then larger
    /// ratio, then smaller function id, then smaller instance index.
    fn beats(&self, other: &RefCand) -> bool {
        let key = |c: &RefCand| match c.ratio() {
            None => (1u8, c.b()),
            Some(r) => (0u8, r),
        };
        let (a, b) = (key(self), key(other));
        if a.0 != b.0 {
            return a.0 > b.0;
        }
        if a.1 != b.1 {
            return a.1 > b.1;
        }
        (self.f.as_str(), self.j) < (other.f.as_str(), other.j)
    }
}

struct RefPlan {
    allocations: BTreeMap<String, u32>,
    allocated: f64,
    reserved: f64,
    picks: Vec<(String, u32)>,
}

fn reference_greedy(cands: &[RefCand], total: f64, fit_check: bool) -> RefPlan {
    let mut remaining: Vec<RefCand> = cands.to_vec();
    let mut picked: Vec<RefCand> = Vec::new();
    let mut rejected: Vec<RefCand> = Vec::new();
    let mut allocated = 0.0;
    let reserved_of = |rest: &[RefCand], rej: &[RefCand]| rest.iter().chain(rej).map(|c| c.mr()).sum::<f64>();
    loop {
        let reserved = reserved_of(&remaining, &rejected);
        if remaining.is_empty() || total - reserved - allocated <= 0.0 {
            break;
        }
        let mut best = 0;
        for i in 1..remaining.len() {
            if remaining[i].beats(&remaining[best]) {
                best = i;
            }
        }
        if remaining[best].ratio() == Some(0.0) {
            break;
        }
        let cand = remaining.remove(best);
        if fit_check && allocated + cand.m + (reserved - cand.mr()) > total {
            rejected.push(cand);
            continue;
        }
        allocated += cand.m;
        picked.push(cand);
    }
    let mut allocations = BTreeMap::new();
    for p in &picked {
        *allocations.entry(p.f.clone()).or_insert(0) += 1;
    }
    RefPlan {
        allocations,
        allocated,
        reserved: reserved_of(&remaining, &rejected),
        picks: picked.iter().map(|p| (p.f.clone(), p.j)).collect(),
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<RefCand>, f64) {
    let n = rng.random_range(0..=8);
    let mut out: Vec<RefCand> = Vec::new();
    let fns = ["fa", "fb", "fc", "fd"];
    for _ in 0..n {
        let f = fns[rng.random_range(0..fns.len())].to_owned();
        let j = out.iter().filter(|c| c.f == f).count() as u32 + 1;
        // dyadic values keep every sum exact, so both sides see identical numbers
        let m = 64.0 * f64::from(rng.random_range(1u32..=16));
        let u = if rng.random_bool(0.15) { 1.0 } else { f64::from(rng.random_range(0u32..=8)) / 8.0 };
        let mu = if rng.random_bool(0.1) { 0 } else { rng.random_range(1u32..=12) };
        let delta = f64::from(rng.random_range(0u32..=32)) / 16.0;
        out.push(RefCand { f, j, mu, u, delta, m });
        // deliberate exact ties
        if rng.random_bool(0.2) && out.len() < 8 {
            let mut twin = out.last().expect("just pushed").clone();
            twin.j += 1;
            if !out.iter().any(|c| c.f == twin.f && c.j == twin.j) {
                out.push(twin);
            }
        }
    }
    out.truncate(8);
    let reserved: f64 = out.iter().map(|c| c.mr()).sum();
    let memory: f64 = out.iter().map(|c| c.m).sum();
    let total = reserved + 64.0 * f64::from(rng.random_range(0u32..=((memory - reserved) / 64.0) as u32 + 4));
    (out, total.max(64.0))
}

fn criterion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a11_0c47);
    let mut selections = 0usize;
    for inst in 0..ORACLE_INSTANCES {
        let (cands, total) = random_instance(&mut rng);
        let scores: Vec<CandidateScore> = cands
            .iter()
            .map(|c| CandidateScore::new(FunctionId::new(&c.f), c.j, c.u, c.mu, c.delta, c.m))
            .collect();
        for (mode, fit) in [(AllocationLoop::FitCheck, true), (AllocationLoop::StrictPaperLoop, false)] {
            let got = allocate(&scores, total, mode);
            let want = reference_greedy(&cands, total, fit);
            let got_alloc: BTreeMap<String, u32> = got.plan.allocations.iter().map(|(f, n)| (f.0.clone(), *n)).collect();
            let got_picks: Vec<(String, u32)> = got.selections.iter().map(|s| (s.function_id.0.clone(), s.instance_index)).collect();
            check(
                got_alloc == want.allocations && got_picks == want.picks,
                format!("instance {inst} ({mode:?}): {got_picks:?} vs reference {:?}", want.picks),
            )?;
            check(
                got.plan.allocated_memory_mb == want.allocated && got.plan.reserved_memory_mb == want.reserved,
                format!(
                    "instance {inst} ({mode:?}): M_A/M_R {}/{} vs {}/{}",
                    got.plan.allocated_memory_mb, got.plan.reserved_memory_mb, want.allocated, want.reserved
                ),
            )?;
            if fit {
                check(
                    got.plan.allocated_memory_mb + got.plan.reserved_memory_mb <= total,
                    format!("instance {inst}: M_A + M_R exceeds M_T"),
                )?;
                selections += got.selections.len();
            }
        }
    }
    Ok(format!("{ORACLE_INSTANCES} instances plan-for-plan equal, {selections} promotions, M_A+M_R<=M_T"))
}

// ---------------------------------------------------------------------------
// 3. durable break-even

fn same_function_trace(f: &FunctionId, n: usize) -> Vec<TraceRecord> {
    (0..n)
        .map(|i| TraceRecord {
            arrival_time_s: 0.0,
            stream_id: StreamId::new(format!("s{i:03}")),
            segment_index: 9,
            function_id: f.clone(),
            deadline_s: 1e6,
            priority: Priority::Normal,
        })
        .collect()
}

/// Sum of per-task (completion - dispatch) for n back-to-back tasks on a host
/// that fits exactly one container.
fn cumulative(spec: &FunctionSpec, n: usize, policy: &PolicyKind) -> Result<f64, String> {
    let repo = Repository::new(vec![spec.clone()]).map_err(|e| e.to_string())?;
    let cfg = EngineConfig {
        hosts: vec![HostConfig {
            total_memory_mb: spec.memory_mb,
            ..Default::default()
        }],
        jitter_fraction: 0.0,
        ..Default::default()
    };
    let out = run(
        &same_function_trace(&spec.function_id, n),
        &cfg,
        &repo,
        policy,
        EstimationMatrix::profile_from_specs(repo.specs()),
        &mut NullObserver,
    )
    .map_err(|e| e.to_string())?;
    Ok(out.outcomes.iter().map(|o| (o.completion_time - o.dispatch_time).as_secs()).sum())
}

fn criterion_break_even() -> Outcome {
    let defaults = default_functions();
    let mut thresholds = Vec::new();
    for class in [SizeClass::Small, SizeClass::Medium, SizeClass::Large] {
        let spec = defaults.iter().find(|s| s.size_class == class).expect("class present in defaults");
        let durable = PolicyKind::StaticDurable {
            counts: [(spec.function_id.clone(), 1)].into_iter().collect(),
        };
        let mut first_win = None;
        for n in 1..=8usize {
            let d = cumulative(spec, n, &durable)?;
            let e = cumulative(spec, n, &PolicyKind::EphemeralOnly)?;
            // closed form: one start+init then transfers, against a start per task
            let d_ref = spec.start_time_s + spec.init_time_s + n as f64 * spec.exec_time_s + (n - 1) as f64 * spec.transfer_time_s;
            let e_ref = n as f64 * (spec.start_time_s + spec.exec_time_s);
            check((d - d_ref).abs() < 1e-5 && (e - e_ref).abs() < 1e-5, format!("{class:?} N={n}: engine {d}/{e} vs closed form {d_ref}/{e_ref}"))?;
            if n <= 2 {
                check(d > e, format!("{class:?} N={n}: durable {d:.3} s should exceed ephemeral {e:.3} s"))?;
            } else {
                check(d < e, format!("{class:?} N={n}: durable {d:.3} s should beat ephemeral {e:.3} s"))?;
            }
            if d < e && first_win.is_none() {
                first_win = Some(n);
            }
        }
        thresholds.push(format!("{class:?}:N={}", first_win.unwrap_or(0)));
    }
    Ok(format!("durable first wins at {}", thresholds.join(" ")))
}

// ---------------------------------------------------------------------------
// 4. makespan ordering

fn criterion_makespan() -> Outcome {
    let cfg = ExperimentConfig::default();
    check(cfg.seeds.len() >= 10, "default config must run at least 10 seeds")?;
    let cmp = run_comparison(&cfg).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for level in [400usize, 800, 1200] {
        let mean = |p: &str| {
            cmp.rows
                .iter()
                .find(|r| r.level == level && r.policy == p)
                .map(|r| r.makespan_mean_s)
                .ok_or_else(|| format!("missing row {p}@{level}"))
        };
        let (d, e, s) = (mean("dynamic")?, mean("ephemeral")?, mean("static")?);
        let gain = (e - d) / e;
        summary.push(format!("{level}: D={d:.1} E={e:.1} S={s:.1} gain={:.1}%", gain * 100.0));
        if !(d < e && e < s) {
            failures.push(format!("ordering at {level}"));
        }
        if level == 1200 && gain < MIN_GAIN_AT_1200 {
            failures.push(format!("gain at 1200 is {:.1}% < 15%", gain * 100.0));
        }
    }
    if failures.is_empty() {
        Ok(summary.join("; "))
    } else {
        Err(format!("{} [{}]", failures.join(", "), summary.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// 5. determinism

fn read_tree(root: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).expect("readable output dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn criterion_determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.levels = vec![200, 400];
    cfg.seeds = vec![0, 1, 2];
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    cmd_compare(&cfg, a.path()).map_err(|e| e.to_string())?;
    cmd_compare(&cfg, b.path()).map_err(|e| e.to_string())?;
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    check(ta.keys().eq(tb.keys()), "output file sets differ")?;
    for (name, bytes) in &ta {
        check(&tb[name] == bytes, format!("{name} differs between runs"))?;
    }
    let traces = ta.keys().filter(|k| k.contains("traces")).count();
    let plans = ta.keys().filter(|k| k.contains("plan_logs")).count();
    check(traces == 6 && plans == 18 && ta.contains_key("reports.csv") && ta.contains_key("comparison.csv"), "unexpected output layout")?;
    Ok(format!("{} files byte-identical across two runs", ta.len()))
}

// ---------------------------------------------------------------------------
// 6. workload shape

fn criterion_workload() -> Outcome {
    let ids: Vec<FunctionId> = default_functions().into_iter().map(|s| s.function_id).collect();
    let mut worst = (f64::INFINITY, f64::NEG_INFINITY);
    let mut traces = 0;
    for level in [400usize, 800, 1200] {
        for seed in 0..10u64 {
            let cfg = WorkloadConfig {
                total_tasks: level,
                rng_seed: seed,
                ..Default::default()
            };
            let trace = generate_trace(&cfg, &ids).map_err(|e| e.to_string())?;
            check(trace.len() == level, format!("level {level} seed {seed}: {} records", trace.len()))?;
            let mut batches: BTreeMap<&str, Vec<&TraceRecord>> = BTreeMap::new();
            for r in &trace {
                batches.entry(r.stream_id.0.as_str()).or_default().push(r);
            }
            let phases = cfg.phases();
            let (mut lull_starts, mut peak_starts) = (0usize, 0usize);
            for (id, b) in &batches {
                check((5..=20).contains(&b.len()), format!("batch {id} has {} tasks", b.len()))?;
                check(b.iter().all(|r| r.function_id == b[0].function_id), format!("batch {id} mixes functions"))?;
                for w in b.windows(2) {
                    check(w[1].arrival_time_s - w[0].arrival_time_s == 2.0, format!("batch {id} gap {}", w[1].arrival_time_s - w[0].arrival_time_s))?;
                    check(w[1].segment_index == w[0].segment_index + 1, format!("batch {id} segments not consecutive"))?;
                }
                match phases.phase_at(b[0].arrival_time_s) {
                    Phase::Lull => lull_starts += 1,
                    Phase::Peak => peak_starts += 1,
                }
            }
            let (lull_len, peak_len) = phases.durations_until(cfg.experiment_window_s);
            let duration_ratio = lull_len / peak_len;
            check(
                (duration_ratio - 3.0).abs() <= 3.0 * DURATION_RATIO_TOL,
                format!("lull:peak duration {duration_ratio}"),
            )?;
            let ratio = (peak_starts as f64 / peak_len) / (lull_starts as f64 / lull_len);
            check(
                (RATE_RATIO_RANGE.0..=RATE_RATIO_RANGE.1).contains(&ratio),
                format!("level {level} seed {seed}: peak/lull batch-rate ratio {ratio:.3}"),
            )?;
            worst = (worst.0.min(ratio), worst.1.max(ratio));
            traces += 1;
        }
    }
    Ok(format!("{traces} traces; rate ratio within [{:.3}, {:.3}]; lull:peak 3:1", worst.0, worst.1))
}

// ---------------------------------------------------------------------------
// 7. engine invariants

#[derive(Default)]
struct Probe {
    entries: Vec<LogEntry>,
    memory_violation: Option<String>,
    last_time: f64,
    regression: Option<String>,
}

impl RunObserver for Probe {
    fn on_entry(&mut self, entry: &LogEntry, memory: &[HostMemory]) {
        if entry.time_s < self.last_time && self.regression.is_none() {
            self.regression = Some(format!("{:?} at {} after {}", entry.kind, entry.time_s, self.last_time));
        }
        self.last_time = entry.time_s;
        for (h, m) in memory.iter().enumerate() {
            if m.used_mb > m.total_mb && self.memory_violation.is_none() {
                self.memory_violation = Some(format!("host {h}: {} > {} MiB at {}", m.used_mb, m.total_mb, entry.time_s));
            }
        }
        self.entries.push(entry.clone());
    }
}

#[derive(Clone, Debug)]
struct MiniCase {
    specs: Vec<FunctionSpec>,
    trace: Vec<TraceRecord>,
    memory: f64,
    policy: u8,
    jitter: f64,
    seed: u64,
    threshold: usize,
}

fn mini_case() -> impl Strategy<Value = MiniCase> {
    let spec = (1u32..=4, 0.2f64..3.0, 0.0f64..1.5, 0.0f64..2.0, prop::sample::select(vec![SizeClass::Small, SizeClass::Medium, SizeClass::Large]));
    (
        prop::collection::vec(spec, 1..=4),
        prop::collection::vec((0u32..40, 0usize..4, 0u32..8, 0u8..10), 0..=50),
        1u32..=6,
        0u8..3,
        prop::sample::select(vec![0.0, 0.1, 0.3]),
        any::<u64>(),
        1usize..=5,
    )
        .prop_map(|(specs, arrivals, mem_units, policy, jitter, seed, threshold)| {
            let specs: Vec<FunctionSpec> = specs
                .into_iter()
                .enumerate()
                .map(|(i, (m, exec, start, init, class))| FunctionSpec {
                    function_id: FunctionId::new(format!("f{i}")),
                    memory_mb: 128.0 * f64::from(m),
                    exec_time_s: exec,
                    start_time_s: start,
                    init_time_s: init,
                    transfer_time_s: 0.01,
                    size_class: class,
                })
                .collect();
            let biggest = specs.iter().map(|s| s.memory_mb).fold(0.0, f64::max);
            let total: f64 = specs.iter().map(|s| s.memory_mb).sum();
            // a static plan must leave every function a way to run
            let floor = if policy == 2 { total } else { biggest };
            let mut trace: Vec<TraceRecord> = arrivals
                .into_iter()
                .enumerate()
                .map(|(i, (t, f, y, urgent))| {
                    let t = f64::from(t) * 0.5;
                    TraceRecord {
                        arrival_time_s: t,
                        stream_id: StreamId::new(format!("s{i:03}")),
                        segment_index: y,
                        function_id: specs[f % specs.len()].function_id.clone(),
                        deadline_s: t + 4.0,
                        priority: if urgent == 0 {
                            Priority::Urgent
                        } else if y < 3 {
                            Priority::High
                        } else {
                            Priority::Normal
                        },
                    }
                })
                .collect();
            trace.sort_by(|a, b| a.order(b));
            MiniCase {
                // between one of the largest function and enough for everyone twice
                memory: floor.max(total * f64::from(mem_units) / 3.0),
                specs,
                trace,
                policy,
                jitter,
                seed,
                threshold,
            }
        })
}

/// Replays Assign/Dispatch/TaskCompleted entries against a reference model of
/// each durable container's local queue (FCFS, Urgent ahead of non-Urgent)
/// and checks that no durable container idles while its queue is non-empty.
fn check_local_queues(entries: &[LogEntry], urgent: &HashMap<u64, bool>) -> Result<(), String> {
    let mut queues: HashMap<String, VecDeque<u64>> = HashMap::new();
    let mut running: HashMap<String, bool> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        let (Some(c), Some(t)) = (&e.container, e.task) else {
            continue;
        };
        if e.mode != Some(ContainerMode::Durable) {
            continue;
        }
        let q = queues.entry(c.clone()).or_default();
        match e.kind {
            LogKind::Assign => {
                let is_urgent = urgent[&t.0];
                let pos = if is_urgent { q.iter().position(|x| !urgent[x]).unwrap_or(q.len()) } else { q.len() };
                q.insert(pos, t.0);
            }
            LogKind::Dispatch => {
                let head = q.pop_front();
                if head != Some(t.0) {
                    return Err(format!("{c}: dispatched task {} but queue head was {head:?}", t.0));
                }
                running.insert(c.clone(), true);
            }
            LogKind::TaskCompleted => {
                running.insert(c.clone(), false);
            }
            _ => {}
        }
        let instant_over = entries.get(i + 1).is_none_or(|n| n.time_s > e.time_s);
        if instant_over {
            for (c, q) in &queues {
                if !q.is_empty() && !running.get(c).copied().unwrap_or(false) {
                    return Err(format!("{c} idle at {} with {} queued", e.time_s, q.len()));
                }
            }
        }
    }
    Ok(())
}

fn run_mini(case: &MiniCase) -> Result<(), TestCaseError> {
    let repo = Repository::new(case.specs.clone()).expect("distinct ids");
    let mut cfg = EngineConfig {
        hosts: vec![HostConfig {
            total_memory_mb: case.memory,
            ephemeral_concurrency_cap: None,
            rng_seed: case.seed,
        }],
        jitter_fraction: case.jitter,
        provisioning_period_s: 6.0,
        ..Default::default()
    };
    cfg.scheduler.oversubscription_threshold = case.threshold;
    let policy = match case.policy {
        0 => PolicyKind::DynamicDurable,
        1 => PolicyKind::EphemeralOnly,
        _ => PolicyKind::static_one_each(&repo),
    };
    let est = EstimationMatrix::profile_from_specs(repo.specs());
    let mut probe = Probe::default();
    let out = run(&case.trace, &cfg, &repo, &policy, est.clone(), &mut probe).map_err(|e| TestCaseError::fail(e.to_string()))?;

    prop_assert!(probe.regression.is_none(), "time regression: {:?}", probe.regression);
    prop_assert!(probe.memory_violation.is_none(), "memory: {:?}", probe.memory_violation);
    // task conservation
    prop_assert_eq!(out.outcomes.len(), case.trace.len());
    prop_assert!(out.tasks.iter().all(|t| t.state() == TaskState::Completed));
    // turnaround decomposition, exact in integer microseconds
    for o in &out.outcomes {
        prop_assert_eq!(
            o.completion_time - o.dispatch_time,
            o.start_overhead + o.init_overhead + o.transfer + o.exec,
            "task {}", o.task
        );
        prop_assert!(o.dispatch_time >= o.arrival_time);
        if o.init_overhead > SimTime::ZERO {
            prop_assert_eq!(o.mode, ContainerMode::Durable);
        }
    }
    // overhead counters agree with per-task sums
    let start: f64 = out.outcomes.iter().map(|o| o.start_overhead.as_secs()).sum();
    prop_assert!((start - out.counters.start_s).abs() < 1e-6);
    // FCFS with Urgent skip-ahead, and work conservation, per durable container
    let urgent: HashMap<u64, bool> = out.outcomes.iter().map(|o| (o.task.0, o.priority == Priority::Urgent)).collect();
    check_local_queues(&probe.entries, &urgent).map_err(TestCaseError::fail)?;
    // replay determinism of the event log
    let mut again = Probe::default();
    run(&case.trace, &cfg, &repo, &policy, est, &mut again).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(probe.entries, again.entries);
    Ok(())
}

fn criterion_engine() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: ENGINE_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let mut tasks = 0usize;
    let counter = std::cell::Cell::new(0usize);
    runner
        .run(&mini_case(), |case| {
            counter.set(counter.get() + case.trace.len());
            run_mini(&case)
        })
        .map_err(|e| e.to_string())?;
    tasks += counter.get();
    Ok(format!("{ENGINE_CASES} random mini-traces ({tasks} tasks): monotone time, memory, conservation, decomposition, FCFS+Urgent, replay"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 7] = [
        ("1 scoring equations", criterion_equations, Duration::from_secs(1)),
        ("2 allocation oracle", criterion_oracle, Duration::from_secs(10)),
        ("3 durable break-even", criterion_break_even, Duration::from_secs(10)),
        ("4 makespan ordering", criterion_makespan, Duration::from_secs(300)),
        ("5 determinism", criterion_determinism, Duration::from_secs(60)),
        ("6 workload shape", criterion_workload, Duration::from_secs(10)),
        ("7 engine invariants", criterion_engine, Duration::from_secs(30)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = t0.elapsed();
        let result = match result {
            Ok(msg) if elapsed > budget => Err(format!("{msg}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(msg) => println!("PASS criterion {name} ({elapsed:.2?}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name} ({elapsed:.2?}): {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
