//! Runs the runtime on real threads.
//!
//! Workers are OS threads pinned to cores when the platform allows it.
//! Compute phases spin; I/O phases sleep. Each worker owns its
//! [`ThreadRecord`] and brackets its own sleeps and parks with the monitor
//! hooks, which stands in for the kernel-side wrapper: a worker that sleeps
//! writes a block event on its core, and an unblock when it resumes. The
//! leader thread waits on all channels with [`wait_any`] and the 1ms timeout.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::event_channel::{wait_any, ChannelSet, OverflowMode};
use crate::metrics::MetricsReport;
use crate::monitor::{CoreId, EmittedEvents, EventKind, SchedState, ThreadId, ThreadRecord};
use crate::trace::{Extra, TraceKind, TraceRecord};

use super::graph::{Phase, TaskCursor, TaskGraph, TaskId};
use super::ledger::{fold_all, oversubscription_check, CoreLedger, Verdict};
use super::logic::{ParkReason, RuntimeState, Step, WakeOrder, WorkerHost, WorkerLogic};
use super::pool::WorkerId;
use super::{RunReport, RuntimeConfig, RuntimeError};

#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    pub n_cores: usize,
    pub runtime: RuntimeConfig,
    /// Pin workers to cores. Falls back to unpinned with a warning when the
    /// platform exposes fewer cores than requested.
    pub pin: bool,
    pub trace: bool,
}

impl LiveConfig {
    pub fn new(n_cores: usize, runtime: RuntimeConfig) -> Self {
        Self {
            n_cores,
            runtime,
            pin: true,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wake {
    Run(CoreId),
    Shutdown,
}

#[derive(Debug, Default)]
struct Slot {
    msg: Mutex<Option<Wake>>,
    cv: Condvar,
}

impl Slot {
    fn post(&self, w: Wake) {
        *self.msg.lock().expect("slot lock") = Some(w);
        self.cv.notify_one();
    }

    fn wait(&self) -> Wake {
        let mut g = self.msg.lock().expect("slot lock");
        loop {
            if let Some(w) = g.take() {
                return w;
            }
            g = self.cv.wait(g).expect("slot lock");
        }
    }
}

/// Time-weighted count of runnable workers on one core.
#[derive(Debug)]
struct Occupancy {
    count: usize,
    since: Instant,
    busy: Duration,
    over: Duration,
}

impl Occupancy {
    fn change(&mut self, now: Instant, delta: isize) {
        let dt = now.saturating_duration_since(self.since);
        match self.count {
            0 => {}
            1 => self.busy += dt,
            _ => self.over += dt,
        }
        self.since = now;
        self.count = (self.count as isize + delta).max(0) as usize;
    }
}

struct LiveState {
    rt: RuntimeState,
    slots: Vec<Arc<Slot>>,
    handles: Vec<JoinHandle<()>>,
    finished_at: Option<Instant>,
}

struct Shared {
    cfg: LiveConfig,
    start: Instant,
    channels: ChannelSet,
    ledgers: Vec<CoreLedger>,
    state: Mutex<LiveState>,
    occupancy: Vec<Mutex<Occupancy>>,
    core_ids: Option<Vec<core_affinity::CoreId>>,
    done: AtomicBool,
    done_cv: (Mutex<()>, Condvar),
    switch_ins: AtomicU64,
    leader_wakeups: AtomicU64,
    blocked_events: AtomicU64,
    unblocked_events: AtomicU64,
    trace: Mutex<Vec<TraceRecord>>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, LiveState> {
        self.state.lock().expect("runtime state lock")
    }

    fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    fn trace(&self, core: CoreId, tid: ThreadId, kind: TraceKind, extra: Extra) {
        if self.cfg.trace {
            let t = self.now_us();
            self.trace.lock().expect("trace lock").push(TraceRecord {
                t,
                core,
                tid: tid.0,
                kind,
                extra,
            });
        }
    }

    fn occupy(&self, core: CoreId, delta: isize) {
        self.occupancy[core]
            .lock()
            .expect("occupancy lock")
            .change(Instant::now(), delta);
    }

    fn pin(&self, core: CoreId) {
        if let Some(ids) = &self.core_ids {
            if !core_affinity::set_for_current(ids[core]) {
                log::warn!("failed to pin worker to core {core}");
            }
        }
    }

    fn execute(self: &Arc<Self>, st: &mut LiveState, orders: Vec<WakeOrder>) {
        for o in orders {
            if o.spawned {
                debug_assert_eq!(o.worker, st.slots.len());
                let slot = Arc::new(Slot::default());
                st.slots.push(Arc::clone(&slot));
                let me = Arc::clone(self);
                let id = o.worker;
                let h = std::thread::Builder::new()
                    .name(format!("umt-worker-{id}"))
                    .spawn(move || worker_main(me, id, slot))
                    .expect("spawn worker thread");
                st.handles.push(h);
            }
            self.trace(
                o.core,
                ThreadId(o.worker as u32),
                TraceKind::Wake,
                Extra::cause("wake"),
            );
            st.slots[o.worker].post(Wake::Run(o.core));
        }
    }

    fn finish(&self, st: &mut LiveState) {
        st.finished_at = Some(Instant::now());
        self.done.store(true, Ordering::SeqCst);
        let _g = self.done_cv.0.lock().expect("done lock");
        self.done_cv.1.notify_all();
    }
}

struct Host<'a> {
    sh: &'a Arc<Shared>,
    st: &'a mut LiveState,
}

impl WorkerHost for Host<'_> {
    fn phase(&self, cursor: TaskCursor) -> Option<Phase> {
        self.st.rt.graph.task(cursor.task).phase(cursor.phase)
    }

    fn check(&mut self, core: CoreId) -> Verdict {
        if self.st.rt.umt {
            oversubscription_check(&self.sh.ledgers[core])
        } else {
            Verdict::Continue
        }
    }

    fn settle_wake(&mut self, core: CoreId) {
        if self.st.rt.umt {
            self.sh.ledgers[core].settle_pending_wake();
        }
    }

    fn pop_task(&mut self) -> Option<TaskCursor> {
        self.st.rt.queue.pop()
    }

    fn requeue_front(&mut self, cursor: TaskCursor) {
        self.st.rt.queue.requeue_front(cursor);
    }

    fn complete(&mut self, task: TaskId) {
        let released = match self.st.rt.complete(task) {
            Ok(r) => r,
            Err(e) => {
                log::error!("{e}");
                0
            }
        };
        if self.st.rt.is_finished() {
            self.sh.finish(self.st);
            return;
        }
        if released > 0 {
            if self.st.rt.umt {
                fold_all(&self.sh.ledgers);
            }
            let orders = self.st.rt.plan_wakeups(&self.sh.ledgers, 1);
            self.sh.execute(self.st, orders);
        }
    }

    fn park(&mut self, _reason: ParkReason) {}
}

fn spin_for(us: u64) {
    let end = Instant::now() + Duration::from_micros(us);
    while Instant::now() < end {
        std::hint::spin_loop();
    }
}

fn worker_main(sh: Arc<Shared>, id: WorkerId, slot: Arc<Slot>) {
    let tid = ThreadId(id as u32);
    let mut record = ThreadRecord::new(tid, 0, SchedState::Blocked);
    record.monitored = sh.cfg.runtime.umt_enabled;
    let channels = sh.channels.channels();
    let mut logic = WorkerLogic::new();
    let emit = |ev: Result<EmittedEvents, _>| match ev {
        Ok(evs) => {
            for e in evs {
                let ctr = match e.kind {
                    EventKind::Block => &sh.blocked_events,
                    EventKind::Unblock => &sh.unblocked_events,
                };
                ctr.fetch_add(1, Ordering::Relaxed);
            }
        }
        Err(e) => log::error!("monitor: {e}"),
    };
    loop {
        let core = match slot.wait() {
            Wake::Shutdown => return,
            Wake::Run(core) => core,
        };
        if record.core != core || sh.switch_ins.load(Ordering::Relaxed) == 0 {
            sh.pin(core);
        }
        emit(record.switch_in(channels, true, core));
        sh.switch_ins.fetch_add(1, Ordering::Relaxed);
        sh.occupy(core, 1);
        sh.trace(core, tid, TraceKind::Dispatch, Extra::default());
        logic.woken(core);
        loop {
            let step = {
                let mut st = sh.lock();
                let mut host = Host {
                    sh: &sh,
                    st: &mut st,
                };
                let step = logic.next_step(core, &mut host);
                if let Step::Park(reason) = step {
                    // pool bookkeeping under the lock; the block event below
                    // is written after the worker is already in the pool
                    st.rt.park(&sh.ledgers, id, reason);
                }
                step
            };
            match step {
                Step::Compute(us) => spin_for(us),
                Step::Io(op) => {
                    emit(record.switch_out(channels, SchedState::Blocked));
                    sh.occupy(core, -1);
                    sh.trace(core, tid, TraceKind::Block, Extra::umt(record.monitored));
                    std::thread::sleep(Duration::from_micros(op.duration_us));
                    emit(record.switch_in(channels, true, core));
                    sh.switch_ins.fetch_add(1, Ordering::Relaxed);
                    sh.occupy(core, 1);
                    sh.trace(core, tid, TraceKind::Dispatch, Extra::default());
                }
                Step::Park(reason) => {
                    if reason == ParkReason::Surrender {
                        sh.trace(core, tid, TraceKind::Surrender, Extra::default());
                    }
                    emit(record.switch_out(channels, SchedState::Blocked));
                    sh.occupy(core, -1);
                    sh.trace(core, tid, TraceKind::Block, Extra::umt(record.monitored));
                    break;
                }
            }
        }
    }
}

fn leader_main(sh: Arc<Shared>) {
    let timeout = Duration::from_micros(sh.cfg.runtime.leader_timeout_us);
    while !sh.done.load(Ordering::SeqCst) {
        if sh.cfg.runtime.umt_enabled {
            wait_any(&sh.channels, timeout);
        } else {
            std::thread::sleep(timeout);
        }
        if sh.done.load(Ordering::SeqCst) {
            break;
        }
        sh.leader_wakeups.fetch_add(1, Ordering::Relaxed);
        let mut st = sh.lock();
        if st.rt.umt {
            fold_all(&sh.ledgers);
        }
        let orders = st.rt.plan_wakeups(&sh.ledgers, 0);
        sh.execute(&mut st, orders);
    }
}

/// Runs `graph` on real threads and reports wall-clock metrics.
pub fn run_live(graph: Arc<TaskGraph>, cfg: &LiveConfig) -> Result<RunReport, RuntimeError> {
    cfg.runtime.validate()?;
    let n = cfg.n_cores;
    if n == 0 {
        return Err(RuntimeError::Config("n_cores must be at least 1".into()));
    }
    let umt = cfg.runtime.umt_enabled;
    let core_ids = if cfg.pin {
        match core_affinity::get_core_ids() {
            Some(ids) if ids.len() >= n => Some(ids),
            other => {
                log::warn!(
                    "{} cores available for pinning, {n} requested; running unpinned",
                    other.map_or(0, |v| v.len())
                );
                None
            }
        }
    } else {
        None
    };
    let channels = ChannelSet::new(n, OverflowMode::Strict);
    let ledgers = (0..n)
        .map(|c| {
            CoreLedger::new(
                c,
                Arc::clone(&channels.channels()[c]),
                if umt { 0 } else { 1 },
            )
        })
        .collect();
    let start = Instant::now();
    let total = graph.len();
    let bound = Duration::from_micros(
        2 * (graph.total_compute_us() + graph.total_io_us()) + 10 * cfg.runtime.leader_timeout_us,
    ) + Duration::from_secs(1);
    let sh = Arc::new(Shared {
        cfg: cfg.clone(),
        start,
        channels,
        ledgers,
        state: Mutex::new(LiveState {
            rt: RuntimeState::new(
                umt,
                Arc::clone(&graph),
                n,
                cfg.runtime.max_workers_per_core * n,
            ),
            slots: Vec::new(),
            handles: Vec::new(),
            finished_at: graph.is_empty().then_some(start),
        }),
        occupancy: (0..n)
            .map(|_| {
                Mutex::new(Occupancy {
                    count: 0,
                    since: start,
                    busy: Duration::ZERO,
                    over: Duration::ZERO,
                })
            })
            .collect(),
        core_ids,
        done: AtomicBool::new(graph.is_empty()),
        done_cv: (Mutex::new(()), Condvar::new()),
        switch_ins: AtomicU64::new(0),
        leader_wakeups: AtomicU64::new(0),
        blocked_events: AtomicU64::new(0),
        unblocked_events: AtomicU64::new(0),
        trace: Mutex::new(Vec::new()),
    });

    {
        let mut st = sh.lock();
        let mut orders = Vec::with_capacity(n);
        for core in 0..n {
            let w = st
                .rt
                .pool
                .spawn(core)
                .ok_or_else(|| RuntimeError::Config("worker cap below core count".into()))?;
            if umt {
                sh.ledgers[core].add_pending_wake();
            }
            orders.push(WakeOrder {
                core,
                worker: w,
                spawned: true,
            });
        }
        sh.execute(&mut st, orders);
    }
    let leader = {
        let sh = Arc::clone(&sh);
        std::thread::Builder::new()
            .name("umt-leader".into())
            .spawn(move || leader_main(sh))
            .expect("spawn leader thread")
    };

    let stalled = {
        let mut g = sh.done_cv.0.lock().expect("done lock");
        let deadline = start + bound;
        loop {
            if sh.done.load(Ordering::SeqCst) {
                break false;
            }
            let now = Instant::now();
            if now >= deadline {
                break true;
            }
            g = sh
                .done_cv
                .1
                .wait_timeout(g, deadline - now)
                .expect("done lock")
                .0;
        }
    };
    sh.done.store(true, Ordering::SeqCst);
    leader
        .join()
        .map_err(|_| RuntimeError::Live("leader panicked".into()))?;

    // wait until every worker is parked, then release them
    let settle_deadline = Instant::now() + Duration::from_secs(5) + bound;
    loop {
        let all_idle = sh.lock().rt.pool.all_idle();
        if all_idle || Instant::now() > settle_deadline {
            break;
        }
        std::thread::sleep(Duration::from_micros(200));
    }
    let handles = {
        let mut st = sh.lock();
        for s in &st.slots {
            s.post(Wake::Shutdown);
        }
        std::mem::take(&mut st.handles)
    };
    for h in handles {
        h.join()
            .map_err(|_| RuntimeError::Live("worker panicked".into()))?;
    }

    let st = sh.lock();
    if stalled || !st.rt.is_finished() {
        return Err(RuntimeError::Stalled {
            completed: st.rt.queue.completed(),
            total,
            at_us: sh.now_us(),
        });
    }
    let finished_at = st.finished_at.unwrap_or(start);
    let makespan = finished_at.duration_since(start);
    let span = makespan.as_secs_f64();
    let frac = |d: Duration| {
        if span > 0.0 {
            (d.as_secs_f64() / span).min(1.0)
        } else {
            0.0
        }
    };
    let mut per_util = Vec::with_capacity(n);
    let mut per_over = Vec::with_capacity(n);
    for occ in &sh.occupancy {
        let mut o = occ.lock().expect("occupancy lock");
        let at = finished_at.max(o.since);
        o.change(at, 0);
        per_util.push(frac(o.busy + o.over));
        per_over.push(frac(o.over));
    }
    fold_all(&sh.ledgers);
    let mut metrics = MetricsReport {
        per_core_utilization: per_util,
        per_core_oversubscription: per_over,
        context_switches: sh.switch_ins.load(Ordering::Relaxed),
        leader_wakeups: sh.leader_wakeups.load(Ordering::Relaxed),
        makespan_us: makespan.as_micros() as u64,
        events_blocked: sh.blocked_events.load(Ordering::Relaxed),
        events_unblocked: sh.unblocked_events.load(Ordering::Relaxed),
        workers: st.rt.pool.len(),
        surrenders: st.rt.stats.surrenders,
        tasks: total,
        ..MetricsReport::default()
    };
    metrics.finish_means();
    let trace = std::mem::take(&mut *sh.trace.lock().expect("trace lock"));
    Ok(RunReport {
        metrics,
        trace,
        final_ledgers: sh.ledgers.iter().map(CoreLedger::ready).collect(),
        ground_truth: vec![0; n],
        task_starts: st.rt.queue.starts().to_vec(),
        task_completions: st.rt.queue.completions().to_vec(),
        max_active_per_core: st.rt.pool.max_active_per_core(),
        stats: st.rt.stats.clone(),
        audit: None,
        sim_stats: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::graph::{IoKind, IoOp, Layout, Task};

    fn mix(n: u32, compute: u64, io: u64) -> Arc<TaskGraph> {
        let tasks = (0..n)
            .map(|i| {
                Task::new(
                    TaskId(i),
                    compute,
                    vec![IoOp {
                        kind: IoKind::Write,
                        duration_us: io,
                    }],
                    Layout::ComputeFirst,
                )
            })
            .collect();
        Arc::new(TaskGraph::new(tasks, vec![]).unwrap())
    }

    fn cfg(umt: bool) -> LiveConfig {
        LiveConfig {
            pin: false,
            ..LiveConfig::new(2, RuntimeConfig::umt(umt))
        }
    }

    #[test]
    fn live_runs_every_task_once_and_ledgers_settle() {
        for umt in [false, true] {
            let r = run_live(mix(24, 200, 500), &cfg(umt)).unwrap();
            assert!(r.all_tasks_once());
            assert_eq!(r.final_ledgers, vec![0, 0], "umt={umt}");
            assert_eq!(r.metrics.events_blocked, r.metrics.events_unblocked);
            assert_eq!(r.metrics.events_blocked > 0, umt);
            if !umt {
                assert_eq!(r.metrics.workers, 2);
                assert_eq!(r.max_active_per_core, 1);
            }
        }
    }

    #[test]
    fn live_empty_graph() {
        let r = run_live(Arc::new(TaskGraph::empty()), &cfg(true)).unwrap();
        assert_eq!(r.metrics.tasks, 0);
        assert_eq!(r.final_ledgers, vec![0, 0]);
    }
}
