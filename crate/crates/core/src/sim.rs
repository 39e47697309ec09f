//! Deterministic discrete-event simulator of cores, run queues, preemption
//! and blocking I/O.
//!
//! Threads are driven by [`ThreadBody`] implementations that return one
//! [`Action`] at a time. Every context switch goes through the monitor, so
//! the channel writes made here are exactly what a kernel implementing the
//! protocol would produce. The simulator also keeps its own ground truth and
//! can check the event-derived per-core counts against it after every event.
//!
//! Time is in integer microseconds. Events at equal times are ordered by
//! kind (I/O completion, thread wake, segment end, leader timer) and then by
//! insertion order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_channel::{ChannelSet, OverflowMode};
use crate::monitor::{
    CoreId, EmittedEvents, EventKind, MonitorError, MonitorTable, SchedState, ThreadId,
    ThreadRecord, UmtProcess,
};
use crate::trace::{Extra, TraceKind, TraceRecord};

pub type Micros = u64;

pub const DEFAULT_TIMESLICE_US: Micros = 1000;

/// Consecutive zero-length actions a body may return before the run is
/// aborted.
const RUNAWAY_LIMIT: u32 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum MigrationPolicy {
    #[default]
    None,
    /// When a thread is made runnable (woken or requeued after its slice),
    /// it is moved to a uniformly chosen other core with this probability.
    RandomOnWake(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_cores: usize,
    pub timeslice_us: Micros,
    pub migration: MigrationPolicy,
    pub rng_seed: u64,
    pub trace: bool,
    /// A woken thread preempts the thread running on its core.
    pub wakeup_preemption: bool,
    pub overflow: OverflowMode,
    /// Check event-derived counts against ground truth after every event.
    pub audit: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_cores: 4,
            timeslice_us: DEFAULT_TIMESLICE_US,
            migration: MigrationPolicy::None,
            rng_seed: 0,
            trace: false,
            wakeup_preemption: true,
            overflow: OverflowMode::Strict,
            audit: true,
        }
    }
}

impl SimConfig {
    pub fn with_cores(n_cores: usize) -> Self {
        Self {
            n_cores,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_cores == 0 {
            return Err(SimError::InvalidConfig("n_cores must be at least 1".into()));
        }
        if self.timeslice_us == 0 {
            return Err(SimError::InvalidConfig("timeslice must be positive".into()));
        }
        if let MigrationPolicy::RandomOnWake(p) = self.migration {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidConfig(format!(
                    "migration probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("core {core} out of range (n_cores = {n_cores})")]
    BadCore { core: CoreId, n_cores: usize },
    #[error("unknown thread {0}")]
    UnknownThread(ThreadId),
    #[error("thread {0} woken while not parked")]
    NotParked(ThreadId),
    #[error("thread {0} returned {RUNAWAY_LIMIT} zero-length actions in a row")]
    Runaway(ThreadId),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

/// What a thread does next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Use the CPU for this long (subject to preemption).
    Compute(Micros),
    /// Leave the core blocked; wake after this long.
    Block(Micros),
    /// Leave the core blocked until someone calls [`SimCtx::wake`].
    Park,
    /// Terminate. Counts as blocking for the monitor.
    Exit,
}

pub trait ThreadBody {
    fn next_action(&mut self, ctx: &mut SimCtx<'_>) -> Action;
}

impl<F> ThreadBody for F
where
    F: FnMut(&mut SimCtx<'_>) -> Action,
{
    fn next_action(&mut self, ctx: &mut SimCtx<'_>) -> Action {
        self(ctx)
    }
}

/// A fixed list of actions followed by `Exit`.
#[derive(Debug, Clone, Default)]
pub struct Script(VecDeque<Action>);

impl Script {
    pub fn new(actions: impl IntoIterator<Item = Action>) -> Self {
        Self(actions.into_iter().collect())
    }
}

impl ThreadBody for Script {
    fn next_action(&mut self, _ctx: &mut SimCtx<'_>) -> Action {
        self.0.pop_front().unwrap_or(Action::Exit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaderControl {
    Continue,
    Stop,
}

/// Behavior run on leader timer events. Runs off-CPU: it consumes no
/// simulated core time.
pub trait LeaderBody {
    /// `periodic` distinguishes the timeout scan from a wake caused by a
    /// channel write.
    fn on_timer(&mut self, ctx: &mut SimCtx<'_>, periodic: bool) -> LeaderControl;
}

/// Public event kinds, in tie-break priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SimEventKind {
    IoComplete,
    ThreadWake,
    /// End of a compute segment: either the slice ran out or the compute
    /// request finished.
    TimesliceExpiry,
    LeaderTimer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Payload {
    Io(ThreadId),
    Wake(ThreadId, CoreId),
    Segment(CoreId, u64),
    Leader { periodic: bool },
}

impl Payload {
    fn kind(&self) -> SimEventKind {
        match self {
            Payload::Io(_) => SimEventKind::IoComplete,
            Payload::Wake(..) => SimEventKind::ThreadWake,
            Payload::Segment(..) => SimEventKind::TimesliceExpiry,
            Payload::Leader { .. } => SimEventKind::LeaderTimer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Queued {
    time: Micros,
    kind: SimEventKind,
    seq: u64,
    payload: Payload,
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.kind, self.seq).cmp(&(other.time, other.kind, other.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-core time accounting. `busy` counts time with exactly one runnable
/// thread, `oversubscribed` time with two or more.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimClock {
    pub now: Micros,
    pub busy: Vec<Micros>,
    pub oversubscribed: Vec<Micros>,
    pub idle: Vec<Micros>,
}

impl SimClock {
    fn new(n_cores: usize) -> Self {
        Self {
            now: 0,
            busy: vec![0; n_cores],
            oversubscribed: vec![0; n_cores],
            idle: vec![0; n_cores],
        }
    }

    /// Fraction of elapsed time core `c` was running something.
    pub fn utilization(&self, c: CoreId) -> f64 {
        ratio(self.busy[c] + self.oversubscribed[c], self.now)
    }

    pub fn oversubscription(&self, c: CoreId) -> f64 {
        ratio(self.oversubscribed[c], self.now)
    }

    pub fn mean_utilization(&self) -> f64 {
        let n = self.busy.len() as f64;
        (0..self.busy.len())
            .map(|c| self.utilization(c))
            .sum::<f64>()
            / n
    }

    pub fn mean_oversubscription(&self) -> f64 {
        let n = self.busy.len() as f64;
        (0..self.busy.len())
            .map(|c| self.oversubscription(c))
            .sum::<f64>()
            / n
    }
}

fn ratio(a: Micros, b: Micros) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadState {
    Running,
    /// On a run queue. `woken` is true until a woken thread is switched in;
    /// false for a preempted thread.
    Ready {
        woken: bool,
    },
    InIo,
    Parked,
    Exited,
}

#[derive(Debug, Clone)]
struct SimThread {
    core: CoreId,
    state: ThreadState,
    remaining: Micros,
    cpu_us: Micros,
}

#[derive(Debug, Clone, Default)]
struct CoreState {
    running: Option<ThreadId>,
    queue: VecDeque<ThreadId>,
    runnable: usize,
    seg_start: Micros,
    seg_gen: u64,
    slice_used: Micros,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub context_switches: u64,
    pub leader_wakeups: u64,
    pub blocked_events: u64,
    pub unblocked_events: u64,
    pub compensations: u64,
    pub migrations: u64,
    pub preemptions: u64,
}

/// Result of checking event-derived counts against the simulator's state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub checks: u64,
    /// Event-derived count differed from the per-thread event view.
    pub accounting_violations: u64,
    /// Checks made with no woken-but-undispatched or uncompensated
    /// migrated thread anywhere.
    pub quiescent_checks: u64,
    /// Event-derived count differed from ground truth at such a point.
    pub quiescent_violations: u64,
    pub first_violation: Option<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.accounting_violations == 0 && self.quiescent_violations == 0
    }
}

struct LeaderSlot {
    body: Option<Box<dyn LeaderBody>>,
    period: Option<Micros>,
    poke_pending: bool,
    stopped: bool,
}

/// Everything except the thread and leader bodies, so a body can be called
/// with mutable access to the kernel.
pub struct Kernel {
    cfg: SimConfig,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    clock: SimClock,
    cores: Vec<CoreState>,
    threads: Vec<SimThread>,
    process: UmtProcess,
    rng: ChaCha8Rng,
    trace: Vec<TraceRecord>,
    stats: SimStats,
    /// Registration adjustments plus net channel writes, per core.
    derived: Vec<i64>,
    spawned: Vec<(ThreadId, Box<dyn ThreadBody>)>,
    leader_poke_wanted: bool,
    leader_stop_requested: bool,
    error: Option<SimError>,
    audit: AuditReport,
}

pub struct Sim {
    k: Kernel,
    bodies: Vec<Option<Box<dyn ThreadBody>>>,
    leader: LeaderSlot,
}

/// Handle given to bodies while they run.
pub struct SimCtx<'a> {
    k: &'a mut Kernel,
    current: Option<ThreadId>,
}

impl SimCtx<'_> {
    pub fn now(&self) -> Micros {
        self.k.clock.now
    }

    pub fn n_cores(&self) -> usize {
        self.k.cfg.n_cores
    }

    /// Thread whose body is running, `None` inside the leader.
    pub fn current(&self) -> Option<ThreadId> {
        self.current
    }

    /// Core of the calling thread.
    ///
    /// # Panics
    /// When called from the leader.
    pub fn core(&self) -> CoreId {
        let tid = self
            .current
            .expect("SimCtx::core called outside a thread body");
        self.k.threads[tid.0 as usize].core
    }

    pub fn channels(&self) -> &ChannelSet {
        self.k.table().channels()
    }

    pub fn monitor(&self) -> &MonitorTable {
        self.k.table()
    }

    pub fn clock(&self) -> &SimClock {
        &self.k.clock
    }

    pub fn stats(&self) -> &SimStats {
        &self.k.stats
    }

    /// Creates a parked thread on `core`. It runs after [`SimCtx::wake`].
    pub fn spawn_parked(
        &mut self,
        core: CoreId,
        body: Box<dyn ThreadBody>,
    ) -> Result<ThreadId, SimError> {
        let tid = self.k.add_thread(core, ThreadState::Parked)?;
        self.k.spawned.push((tid, body));
        Ok(tid)
    }

    pub fn register_thread(&mut self, tid: ThreadId, enable: bool) -> Result<(), SimError> {
        self.k.register_thread(tid, enable)
    }

    /// Makes a parked thread runnable on `core` at the current time.
    pub fn wake(&mut self, tid: ThreadId, core: CoreId) -> Result<(), SimError> {
        self.k.check_core(core)?;
        match self.k.threads.get(tid.0 as usize) {
            None => Err(SimError::UnknownThread(tid)),
            Some(t) if t.state != ThreadState::Parked => Err(SimError::NotParked(tid)),
            Some(_) => {
                let now = self.k.clock.now;
                self.k.push(now, Payload::Wake(tid, core));
                Ok(())
            }
        }
    }

    /// Stops leader timers once the current callback returns.
    pub fn stop_leader(&mut self) {
        self.k.leader_stop_requested = true;
    }

    pub fn trace(&mut self, core: CoreId, tid: ThreadId, kind: TraceKind, extra: Extra) {
        self.k.emit_trace(core, tid, kind, extra);
    }
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut process = UmtProcess::new();
        process.enable_monitoring(cfg.n_cores, cfg.overflow)?;
        let n = cfg.n_cores;
        Ok(Self {
            k: Kernel {
                rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
                queue: BinaryHeap::new(),
                seq: 0,
                clock: SimClock::new(n),
                cores: vec![CoreState::default(); n],
                threads: Vec::new(),
                process,
                trace: Vec::new(),
                stats: SimStats::default(),
                derived: vec![0; n],
                spawned: Vec::new(),
                leader_poke_wanted: false,
                leader_stop_requested: false,
                error: None,
                audit: AuditReport::default(),
                cfg,
            },
            bodies: Vec::new(),
            leader: LeaderSlot {
                body: None,
                period: None,
                poke_pending: false,
                stopped: false,
            },
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.k.cfg
    }

    pub fn now(&self) -> Micros {
        self.k.clock.now
    }

    pub fn clock(&self) -> &SimClock {
        &self.k.clock
    }

    pub fn stats(&self) -> &SimStats {
        &self.k.stats
    }

    pub fn monitor(&self) -> &MonitorTable {
        self.k.table()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.k.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.k.trace)
    }

    pub fn audit(&self) -> &AuditReport {
        &self.k.audit
    }

    pub fn thread_count(&self) -> usize {
        self.k.threads.len()
    }

    pub fn thread_state(&self, tid: ThreadId) -> Option<ThreadState> {
        self.k.threads.get(tid.0 as usize).map(|t| t.state)
    }

    pub fn thread_core(&self, tid: ThreadId) -> Option<CoreId> {
        self.k.threads.get(tid.0 as usize).map(|t| t.core)
    }

    pub fn cpu_time(&self, tid: ThreadId) -> Option<Micros> {
        self.k.threads.get(tid.0 as usize).map(|t| t.cpu_us)
    }

    pub fn running(&self, core: CoreId) -> Option<ThreadId> {
        self.k.cores[core].running
    }

    pub fn queued(&self, core: CoreId) -> Vec<ThreadId> {
        self.k.cores[core].queue.iter().copied().collect()
    }

    /// Monitored threads running or queued on each core.
    pub fn ground_truth_ready(&self) -> Vec<i64> {
        self.k.ground_truth()
    }

    /// Per-core count implied by every channel write so far, plus the
    /// adjustment made when threads were registered while runnable.
    pub fn event_derived_ready(&self) -> Vec<i64> {
        self.k.derived.clone()
    }

    /// Number of monitored threads made runnable but whose channel writes
    /// have not happened yet.
    pub fn in_flight(&self) -> usize {
        self.k.in_flight()
    }

    pub fn pending_events(&self) -> usize {
        self.k.queue.len()
    }

    /// Adds a ready thread on `core`. It is not monitored until registered.
    pub fn spawn_thread(
        &mut self,
        core: CoreId,
        body: impl ThreadBody + 'static,
    ) -> Result<ThreadId, SimError> {
        let tid = self
            .k
            .add_thread(core, ThreadState::Ready { woken: false })?;
        self.bodies.push(Some(Box::new(body)));
        self.k
            .emit_trace(core, tid, TraceKind::Wake, Extra::cause("spawn"));
        self.k.cores[core].queue.push_back(tid);
        self.k.cores[core].runnable += 1;
        self.k
            .push(self.k.clock.now, Payload::Segment(core, u64::MAX));
        Ok(tid)
    }

    /// Adds a parked thread on `core`; see [`Sim::wake`].
    pub fn spawn_parked(
        &mut self,
        core: CoreId,
        body: impl ThreadBody + 'static,
    ) -> Result<ThreadId, SimError> {
        let tid = self.k.add_thread(core, ThreadState::Parked)?;
        self.bodies.push(Some(Box::new(body)));
        Ok(tid)
    }

    pub fn register_thread(&mut self, tid: ThreadId, enable: bool) -> Result<(), SimError> {
        self.k.register_thread(tid, enable)
    }

    pub fn wake(&mut self, tid: ThreadId, core: CoreId) -> Result<(), SimError> {
        let mut ctx = SimCtx {
            k: &mut self.k,
            current: None,
        };
        ctx.wake(tid, core)
    }

    /// Installs the leader. It runs at `now` if any channel write happens,
    /// and every `period` µs if given.
    pub fn set_leader(&mut self, body: impl LeaderBody + 'static, period: Option<Micros>) {
        self.leader = LeaderSlot {
            body: Some(Box::new(body)),
            period,
            poke_pending: false,
            stopped: false,
        };
        if let Some(p) = period {
            let at = self.k.clock.now + p.max(1);
            self.k.push(at, Payload::Leader { periodic: true });
        }
    }

    /// Dispatches every event with time ≤ `t`, then advances the clock to `t`.
    pub fn run_until(&mut self, t: Micros) -> Result<&SimClock, SimError> {
        self.step_until(t)?;
        if t > self.k.clock.now {
            self.k.advance(t);
        }
        Ok(&self.k.clock)
    }

    /// Runs until no events remain.
    pub fn run(&mut self) -> Result<&SimClock, SimError> {
        self.step_until(Micros::MAX)?;
        Ok(&self.k.clock)
    }

    /// Runs until no events remain or the next event is later than `limit`.
    /// Returns `true` when the event queue drained.
    pub fn run_bounded(&mut self, limit: Micros) -> Result<bool, SimError> {
        self.step_until(limit)?;
        Ok(self.k.queue.is_empty())
    }

    fn step_until(&mut self, t: Micros) -> Result<(), SimError> {
        while let Some(Reverse(next)) = self.k.queue.peek().copied() {
            if next.time > t {
                break;
            }
            self.k.queue.pop();
            match next.payload {
                Payload::Leader { .. } if self.leader.stopped || self.leader.body.is_none() => {
                    continue
                }
                Payload::Segment(c, gen) if gen != u64::MAX && gen != self.k.cores[c].seg_gen => {
                    continue
                }
                _ => {}
            }
            self.k.advance(next.time);
            self.handle(next.payload);
            self.after_event();
            if let Some(e) = self.k.error.take() {
                return Err(e);
            }
        }
        Ok(())
    }

    fn after_event(&mut self) {
        if self.k.leader_stop_requested {
            self.leader.stopped = true;
        }
        if self.k.leader_poke_wanted {
            self.k.leader_poke_wanted = false;
            if self.leader.body.is_some() && !self.leader.stopped && !self.leader.poke_pending {
                self.leader.poke_pending = true;
                let now = self.k.clock.now;
                self.k.push(now, Payload::Leader { periodic: false });
            }
        }
        if self.k.cfg.audit {
            self.k.run_audit();
        }
    }

    fn handle(&mut self, payload: Payload) {
        match payload {
            Payload::Io(tid) => {
                let core = self.k.threads[tid.0 as usize].core;
                self.k
                    .emit_trace(core, tid, TraceKind::Wake, Extra::cause("io"));
                self.make_runnable(tid, core, true);
            }
            Payload::Wake(tid, core) => {
                if self.k.threads[tid.0 as usize].state != ThreadState::Parked {
                    self.k.error = Some(SimError::NotParked(tid));
                    return;
                }
                self.k.threads[tid.0 as usize].core = core;
                self.k
                    .emit_trace(core, tid, TraceKind::Wake, Extra::cause("wake"));
                self.make_runnable(tid, core, true);
            }
            Payload::Segment(core, u64::MAX) => {
                if self.k.cores[core].running.is_none() {
                    self.run_core(core);
                }
            }
            Payload::Segment(core, _) => {
                self.settle_segment(core);
                self.run_core(core);
            }
            Payload::Leader { periodic } => {
                if !periodic {
                    self.leader.poke_pending = false;
                }
                let Some(mut body) = self.leader.body.take() else {
                    return;
                };
                self.k.stats.leader_wakeups += 1;
                let control = {
                    let mut ctx = SimCtx {
                        k: &mut self.k,
                        current: None,
                    };
                    body.on_timer(&mut ctx, periodic)
                };
                self.leader.body = Some(body);
                self.adopt_spawned();
                if control == LeaderControl::Stop {
                    self.k.leader_stop_requested = true;
                }
                if periodic && control == LeaderControl::Continue && !self.k.leader_stop_requested {
                    if let Some(p) = self.leader.period {
                        let at = self.k.clock.now + p.max(1);
                        self.k.push(at, Payload::Leader { periodic: true });
                    }
                }
            }
        }
    }

    /// Charges the running thread for the segment that just ended.
    fn settle_segment(&mut self, core: CoreId) {
        let now = self.k.clock.now;
        let cs = &mut self.k.cores[core];
        let Some(tid) = cs.running else { return };
        let elapsed = now - cs.seg_start;
        cs.slice_used += elapsed;
        cs.seg_start = now;
        cs.seg_gen += 1;
        let t = &mut self.k.threads[tid.0 as usize];
        t.remaining -= elapsed;
        t.cpu_us += elapsed;
    }

    /// Puts a woken or preempted thread on a run queue, applying the
    /// migration policy.
    fn make_runnable(&mut self, tid: ThreadId, core: CoreId, woken: bool) {
        let target = self.k.pick_core(core);
        if target != core {
            self.k.stats.migrations += 1;
            self.k
                .emit_trace(target, tid, TraceKind::Migrate, Extra::from_core(core));
        }
        let t = &mut self.k.threads[tid.0 as usize];
        let preempted_elsewhere = t.state == ThreadState::Running;
        t.core = target;
        t.state = ThreadState::Ready { woken };
        if preempted_elsewhere {
            self.k.cores[core].runnable -= 1;
        }
        self.k.cores[target].runnable += 1;

        let preempt =
            woken && self.k.cfg.wakeup_preemption && self.k.cores[target].running.is_some();
        if preempt {
            self.settle_segment(target);
            let victim = self.k.cores[target].running.take().expect("checked above");
            self.k.switch_out(victim, SchedState::Ready);
            self.k.threads[victim.0 as usize].state = ThreadState::Ready { woken: false };
            self.k.stats.preemptions += 1;
            let q = &mut self.k.cores[target].queue;
            q.push_front(victim);
            q.push_front(tid);
        } else {
            self.k.cores[target].queue.push_back(tid);
        }
        if self.k.cores[target].running.is_none() {
            self.run_core(target);
        }
    }

    /// Drives `core` until its running thread starts a compute segment or
    /// the core has nothing to run.
    fn run_core(&mut self, core: CoreId) {
        let mut zero_steps = 0u32;
        loop {
            if self.k.error.is_some() {
                return;
            }
            let Some(tid) = self.k.cores[core].running else {
                let Some(next) = self.k.cores[core].queue.pop_front() else {
                    return;
                };
                self.k.switch_in(next, core);
                continue;
            };
            let remaining = self.k.threads[tid.0 as usize].remaining;
            if remaining > 0 {
                let slice = self.k.cfg.timeslice_us;
                let cs = &mut self.k.cores[core];
                if cs.slice_used >= slice {
                    if cs.queue.is_empty() {
                        cs.slice_used = 0;
                    } else {
                        cs.running = None;
                        self.k.switch_out(tid, SchedState::Ready);
                        self.k.stats.preemptions += 1;
                        self.make_runnable(tid, core, false);
                        if self.k.cores[core].running.is_some() {
                            return;
                        }
                        continue;
                    }
                }
                let cs = &mut self.k.cores[core];
                let seg = remaining.min(slice - cs.slice_used);
                cs.seg_start = self.k.clock.now;
                cs.seg_gen += 1;
                let gen = cs.seg_gen;
                let at = self.k.clock.now + seg;
                self.k.push(at, Payload::Segment(core, gen));
                return;
            }
            let action = self.call_body(tid);
            match action {
                Action::Compute(0) => {
                    zero_steps += 1;
                    if zero_steps >= RUNAWAY_LIMIT {
                        self.k.error = Some(SimError::Runaway(tid));
                        return;
                    }
                }
                Action::Compute(d) => self.k.threads[tid.0 as usize].remaining = d,
                Action::Block(d) => {
                    self.k.leave(core, tid, ThreadState::InIo);
                    let at = self.k.clock.now + d;
                    self.k.push(at, Payload::Io(tid));
                }
                Action::Park => self.k.leave(core, tid, ThreadState::Parked),
                Action::Exit => self.k.leave(core, tid, ThreadState::Exited),
            }
        }
    }

    fn call_body(&mut self, tid: ThreadId) -> Action {
        let mut body = self.bodies[tid.0 as usize]
            .take()
            .expect("body re-entered while running");
        let action = {
            let mut ctx = SimCtx {
                k: &mut self.k,
                current: Some(tid),
            };
            body.next_action(&mut ctx)
        };
        self.bodies[tid.0 as usize] = Some(body);
        self.adopt_spawned();
        action
    }

    fn adopt_spawned(&mut self) {
        for (tid, body) in self.k.spawned.drain(..) {
            let i = tid.0 as usize;
            if self.bodies.len() <= i {
                self.bodies.resize_with(i + 1, || None);
            }
            self.bodies[i] = Some(body);
        }
    }
}

impl Kernel {
    fn table(&self) -> &MonitorTable {
        self.process.table().expect("enabled at construction")
    }

    fn table_mut(&mut self) -> &mut MonitorTable {
        self.process.table_mut().expect("enabled at construction")
    }

    fn check_core(&self, core: CoreId) -> Result<(), SimError> {
        if core >= self.cfg.n_cores {
            return Err(SimError::BadCore {
                core,
                n_cores: self.cfg.n_cores,
            });
        }
        Ok(())
    }

    fn push(&mut self, time: Micros, payload: Payload) {
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            time,
            kind: payload.kind(),
            seq: self.seq,
            payload,
        }));
    }

    fn add_thread(&mut self, core: CoreId, state: ThreadState) -> Result<ThreadId, SimError> {
        self.check_core(core)?;
        let tid = ThreadId(self.threads.len() as u32);
        let sched = match state {
            ThreadState::Ready { .. } => SchedState::Ready,
            _ => SchedState::Blocked,
        };
        self.table_mut()
            .add_thread(ThreadRecord::new(tid, core, sched))?;
        self.threads.push(SimThread {
            core,
            state,
            remaining: 0,
            cpu_us: 0,
        });
        Ok(tid)
    }

    /// Core on which a thread counts according to the channel writes made
    /// for it so far, if any.
    fn event_view_core(&self, tid: ThreadId) -> Option<CoreId> {
        let rec = self.table().thread(tid)?;
        if !rec.monitored {
            return None;
        }
        match self.threads[tid.0 as usize].state {
            ThreadState::Running => Some(rec.core),
            ThreadState::Ready { woken: false } => Some(rec.last_core),
            _ => None,
        }
    }

    fn register_thread(&mut self, tid: ThreadId, enable: bool) -> Result<(), SimError> {
        if tid.0 as usize >= self.threads.len() {
            return Err(SimError::UnknownThread(tid));
        }
        let before = self.event_view_core(tid);
        self.table_mut().register_thread(tid, enable)?;
        let after = self.event_view_core(tid);
        if let Some(c) = before {
            self.derived[c] -= 1;
        }
        if let Some(c) = after {
            self.derived[c] += 1;
        }
        Ok(())
    }

    fn advance(&mut self, to: Micros) {
        let dt = to - self.clock.now;
        if dt > 0 {
            for (c, cs) in self.cores.iter().enumerate() {
                if cs.running.is_none() {
                    self.clock.idle[c] += dt;
                } else if cs.runnable >= 2 {
                    self.clock.oversubscribed[c] += dt;
                } else {
                    self.clock.busy[c] += dt;
                }
            }
        }
        self.clock.now = to;
    }

    fn pick_core(&mut self, core: CoreId) -> CoreId {
        let n = self.cfg.n_cores;
        match self.cfg.migration {
            MigrationPolicy::RandomOnWake(p) if n > 1 && self.rng.gen_bool(p) => {
                let other = self.rng.gen_range(0..n - 1);
                if other >= core {
                    other + 1
                } else {
                    other
                }
            }
            _ => core,
        }
    }

    fn switch_in(&mut self, tid: ThreadId, core: CoreId) {
        let woken = matches!(
            self.threads[tid.0 as usize].state,
            ThreadState::Ready { woken: true }
        );
        let emitted = match self.table_mut().on_switch_in(tid, woken, core) {
            Ok(e) => e,
            Err(e) => {
                self.error = Some(e.into());
                return;
            }
        };
        self.record_emitted(tid, &emitted);
        let cs = &mut self.cores[core];
        cs.running = Some(tid);
        cs.slice_used = 0;
        self.threads[tid.0 as usize].state = ThreadState::Running;
        self.stats.context_switches += 1;
        self.emit_trace(core, tid, TraceKind::Dispatch, Extra::default());
    }

    fn switch_out(&mut self, tid: ThreadId, next: SchedState) -> EmittedEvents {
        match self.table_mut().on_switch_out(tid, next) {
            Ok(e) => {
                self.record_emitted(tid, &e);
                e
            }
            Err(e) => {
                self.error = Some(e.into());
                EmittedEvents::new()
            }
        }
    }

    /// Takes the running thread off `core` in a non-runnable state.
    fn leave(&mut self, core: CoreId, tid: ThreadId, state: ThreadState) {
        let cs = &mut self.cores[core];
        cs.running = None;
        cs.runnable -= 1;
        cs.seg_gen += 1;
        let emitted = self.switch_out(tid, SchedState::Blocked);
        self.threads[tid.0 as usize].state = state;
        self.emit_trace(core, tid, TraceKind::Block, Extra::umt(!emitted.is_empty()));
    }

    fn record_emitted(&mut self, tid: ThreadId, events: &EmittedEvents) {
        for e in events {
            match e.kind {
                EventKind::Block => {
                    self.stats.blocked_events += 1;
                    self.derived[e.core] -= 1;
                }
                EventKind::Unblock => {
                    self.stats.unblocked_events += 1;
                    self.derived[e.core] += 1;
                }
            }
            if e.compensation {
                if e.kind == EventKind::Block {
                    self.stats.compensations += 1;
                    self.emit_trace(e.core, tid, TraceKind::Block, Extra::compensation());
                } else {
                    let mut extra = Extra::compensation();
                    extra.umt = None;
                    self.emit_trace(e.core, tid, TraceKind::Unblock, extra);
                }
            } else if e.kind == EventKind::Unblock {
                self.emit_trace(e.core, tid, TraceKind::Unblock, Extra::default());
            }
        }
        if !events.is_empty() {
            self.leader_poke_wanted = true;
        }
    }

    fn emit_trace(&mut self, core: CoreId, tid: ThreadId, kind: TraceKind, extra: Extra) {
        if self.cfg.trace {
            self.trace.push(TraceRecord {
                t: self.clock.now,
                core,
                tid: tid.0,
                kind,
                extra,
            });
        }
    }

    fn ground_truth(&self) -> Vec<i64> {
        let mut out = vec![0i64; self.cfg.n_cores];
        for rec in self.table().threads().filter(|r| r.monitored) {
            let t = &self.threads[rec.id.0 as usize];
            if matches!(t.state, ThreadState::Running | ThreadState::Ready { .. }) {
                out[t.core] += 1;
            }
        }
        out
    }

    fn in_flight(&self) -> usize {
        self.table()
            .threads()
            .filter(|r| r.monitored)
            .filter(|r| match self.threads[r.id.0 as usize].state {
                ThreadState::Ready { woken: true } => true,
                ThreadState::Ready { woken: false } => {
                    r.last_core != self.threads[r.id.0 as usize].core
                }
                _ => false,
            })
            .count()
    }

    fn run_audit(&mut self) {
        let mut view = vec![0i64; self.cfg.n_cores];
        for i in 0..self.threads.len() {
            if let Some(c) = self.event_view_core(ThreadId(i as u32)) {
                view[c] += 1;
            }
        }
        self.audit.checks += 1;
        if view != self.derived {
            self.audit.accounting_violations += 1;
            self.audit.first_violation.get_or_insert_with(|| {
                format!(
                    "t={}: derived {:?} != event view {:?}",
                    self.clock.now, self.derived, view
                )
            });
        }
        if self.in_flight() == 0 {
            self.audit.quiescent_checks += 1;
            let truth = self.ground_truth();
            if truth != self.derived {
                self.audit.quiescent_violations += 1;
                self.audit.first_violation.get_or_insert_with(|| {
                    format!(
                        "t={}: derived {:?} != ground truth {:?}",
                        self.clock.now, self.derived, truth
                    )
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(n: usize) -> Sim {
        Sim::new(SimConfig {
            trace: true,
            ..SimConfig::with_cores(n)
        })
        .unwrap()
    }

    #[test]
    fn idle_run_accumulates_idle_only() {
        let mut s = sim(4);
        let clock = s.run_until(500).unwrap();
        assert_eq!(clock.idle, vec![500; 4]);
        assert_eq!(clock.busy, vec![0; 4]);
        assert_eq!(clock.oversubscribed, vec![0; 4]);
    }

    #[test]
    fn run_until_zero_is_noop() {
        let mut s = sim(2);
        s.spawn_thread(0, Script::new([Action::Compute(10)]))
            .unwrap();
        let before = s.pending_events();
        s.run_until(0).unwrap();
        // the dispatch at t=0 is processed; no time passes
        assert_eq!(s.now(), 0);
        assert!(before >= 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(
            Sim::new(SimConfig::with_cores(0)),
            Err(SimError::InvalidConfig(_))
        ));
        let cfg = SimConfig {
            timeslice_us: 0,
            ..SimConfig::default()
        };
        assert!(Sim::new(cfg).is_err());
        let cfg = SimConfig {
            migration: MigrationPolicy::RandomOnWake(1.5),
            ..SimConfig::default()
        };
        assert!(Sim::new(cfg).is_err());
        let mut s = sim(1);
        assert_eq!(
            s.spawn_thread(3, Script::default()).unwrap_err(),
            SimError::BadCore {
                core: 3,
                n_cores: 1
            }
        );
    }

    #[test]
    fn single_block_leaves_core_idle_for_its_duration() {
        let mut s = sim(1);
        s.spawn_thread(
            0,
            Script::new([Action::Compute(50), Action::Block(100), Action::Compute(50)]),
        )
        .unwrap();
        let c = s.run().unwrap().clone();
        assert_eq!(c.now, 200);
        assert_eq!(c.busy[0], 100);
        assert_eq!(c.idle[0], 100);
    }

    #[test]
    fn compute_spread_finishes_at_work_over_cores() {
        let mut s = sim(4);
        for c in 0..4 {
            s.spawn_thread(c, Script::new([Action::Compute(2500)]))
                .unwrap();
        }
        assert_eq!(s.run().unwrap().now, 2500);
    }

    #[test]
    fn n_threads_on_one_core_one_runs() {
        let mut s = sim(1);
        for _ in 0..3 {
            s.spawn_thread(0, Script::new([Action::Compute(5000)]))
                .unwrap();
        }
        s.run_until(1).unwrap();
        assert!(s.running(0).is_some());
        assert_eq!(s.queued(0).len(), 2);
    }

    #[test]
    fn round_robin_shares_core_evenly() {
        let mut s = sim(1);
        let a = s
            .spawn_thread(0, Script::new([Action::Compute(1_000_000)]))
            .unwrap();
        let b = s
            .spawn_thread(0, Script::new([Action::Compute(1_000_000)]))
            .unwrap();
        s.run_until(100_000).unwrap();
        assert_eq!(s.cpu_time(a).unwrap() + s.cpu_time(b).unwrap(), 100_000);
        assert_eq!(s.cpu_time(a), Some(50_000));
        assert_eq!(s.clock().oversubscribed[0], 100_000);
    }

    #[test]
    fn lone_thread_keeps_core_across_slices() {
        let mut s = sim(1);
        s.spawn_thread(0, Script::new([Action::Compute(10_500)]))
            .unwrap();
        s.run().unwrap();
        assert_eq!(s.stats().context_switches, 1);
        assert_eq!(s.stats().preemptions, 0);
        assert_eq!(s.now(), 10_500);
    }

    #[test]
    fn pure_preemption_emits_nothing() {
        let mut s = sim(2);
        for c in [0, 0, 1, 1] {
            let t = s
                .spawn_thread(c, Script::new([Action::Compute(20_000)]))
                .unwrap();
            s.register_thread(t, true).unwrap();
        }
        // exiting is a block; stop before anyone finishes
        s.run_until(30_000).unwrap();
        assert!(s.stats().preemptions > 0);
        assert_eq!(s.stats().blocked_events, 0);
        assert_eq!(s.stats().unblocked_events, 0);
        assert!(s.trace().iter().all(|r| !r.is_channel_write()));
    }

    #[test]
    fn monitored_block_and_resume_write_events() {
        let mut s = sim(2);
        let t = s
            .spawn_thread(1, Script::new([Action::Block(10), Action::Compute(5)]))
            .unwrap();
        s.register_thread(t, true).unwrap();
        s.run_until(5).unwrap();
        assert_eq!(
            s.monitor().channels()[1].peek(),
            crate::event_channel::EventBatch::new(1, 0)
        );
        s.run().unwrap();
        // unblock, then exit counts as another block
        assert_eq!(
            s.monitor().channels()[1].peek(),
            crate::event_channel::EventBatch::new(2, 1)
        );
        assert_eq!(s.event_derived_ready(), vec![0, 0]);
        assert!(s.audit().is_clean());
    }

    #[test]
    fn unmonitored_threads_emit_nothing() {
        let mut s = sim(1);
        s.spawn_thread(0, Script::new([Action::Block(10), Action::Compute(5)]))
            .unwrap();
        s.run().unwrap();
        assert_eq!(s.stats().blocked_events + s.stats().unblocked_events, 0);
    }

    #[test]
    fn wake_of_running_thread_is_an_error() {
        let mut s = sim(1);
        let t = s
            .spawn_thread(0, Script::new([Action::Compute(10)]))
            .unwrap();
        assert_eq!(s.wake(t, 0), Err(SimError::NotParked(t)));
    }

    #[test]
    fn parked_thread_runs_after_wake() {
        let mut s = sim(2);
        let t = s
            .spawn_parked(0, Script::new([Action::Compute(7)]))
            .unwrap();
        s.register_thread(t, true).unwrap();
        s.run_until(100).unwrap();
        assert_eq!(s.cpu_time(t), Some(0));
        s.wake(t, 1).unwrap();
        s.run().unwrap();
        assert_eq!(s.cpu_time(t), Some(7));
        assert_eq!(
            s.monitor().channels()[1].peek(),
            crate::event_channel::EventBatch::new(1, 1)
        );
    }

    #[test]
    fn wakeup_preempts_running_thread() {
        let mut s = sim(1);
        let io = s
            .spawn_thread(0, Script::new([Action::Block(100), Action::Compute(10)]))
            .unwrap();
        let hog = s
            .spawn_thread(0, Script::new([Action::Compute(500)]))
            .unwrap();
        s.run_until(101).unwrap();
        assert_eq!(s.running(0), Some(io));
        assert_eq!(s.queued(0), vec![hog]);
        s.run().unwrap();
        assert_eq!(s.now(), 510);
    }

    #[test]
    fn timeslice_preemption_migrates_and_compensates() {
        let mut s = Sim::new(SimConfig {
            trace: true,
            migration: MigrationPolicy::RandomOnWake(1.0),
            ..SimConfig::with_cores(2)
        })
        .unwrap();
        let a = s
            .spawn_thread(0, Script::new([Action::Compute(3000)]))
            .unwrap();
        let b = s
            .spawn_thread(0, Script::new([Action::Compute(3000)]))
            .unwrap();
        s.register_thread(a, true).unwrap();
        s.register_thread(b, true).unwrap();
        s.run().unwrap();
        assert!(s.stats().compensations >= 1);
        assert!(s.audit().is_clean(), "{:?}", s.audit());
    }

    #[test]
    fn determinism_same_seed_same_trace() {
        let go = || {
            let mut s = Sim::new(SimConfig {
                trace: true,
                rng_seed: 9,
                migration: MigrationPolicy::RandomOnWake(0.5),
                ..SimConfig::with_cores(3)
            })
            .unwrap();
            for i in 0..6u64 {
                let t = s
                    .spawn_thread(
                        (i % 3) as usize,
                        Script::new([
                            Action::Compute(300 + i * 70),
                            Action::Block(200),
                            Action::Compute(1500),
                            Action::Block(50 * i),
                        ]),
                    )
                    .unwrap();
                s.register_thread(t, true).unwrap();
            }
            s.run().unwrap();
            (crate::trace::to_jsonl(s.trace()), s.clock().clone())
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn accumulators_sum_to_elapsed() {
        let mut s = sim(3);
        for i in 0..7 {
            s.spawn_thread(
                i % 3,
                Script::new([
                    Action::Compute(900),
                    Action::Block(333),
                    Action::Compute(1200),
                ]),
            )
            .unwrap();
        }
        let c = s.run().unwrap();
        for core in 0..3 {
            assert_eq!(c.busy[core] + c.oversubscribed[core] + c.idle[core], c.now);
        }
    }

    #[test]
    fn ties_order_by_kind_then_insertion() {
        let q = |time, seq, payload: Payload| Queued {
            time,
            kind: payload.kind(),
            seq,
            payload,
        };
        let mut order = [
            q(1, 1, Payload::Leader { periodic: true }),
            q(1, 2, Payload::Segment(0, 0)),
            q(1, 3, Payload::Io(ThreadId(0))),
            q(1, 4, Payload::Wake(ThreadId(1), 0)),
            q(1, 5, Payload::Io(ThreadId(2))),
            q(0, 6, Payload::Leader { periodic: true }),
        ];
        order.sort();
        let seqs: Vec<_> = order.iter().map(|q| q.seq).collect();
        assert_eq!(seqs, vec![6, 3, 5, 4, 2, 1]);
    }
}
