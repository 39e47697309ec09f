//! Scheduling decisions shared by the simulated and the live runtime.
//!
//! Nothing here blocks or refers to real threads: hosts call
//! [`WorkerLogic::next_step`] and carry out the returned [`Step`], and call
//! [`RuntimeState::plan_wakeups`] and carry out the returned orders.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::monitor::CoreId;

use super::graph::{DispatchError, DispatchQueue, IoOp, Phase, TaskCursor, TaskGraph, TaskId};
use super::ledger::{CoreLedger, Verdict};
use super::pool::{WorkerId, WorkerPool};

/// A worker to resume on a core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WakeOrder {
    pub core: CoreId,
    pub worker: WorkerId,
    /// The worker did not exist before this order.
    pub spawned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParkReason {
    /// Oversubscription detected at a scheduling point.
    Surrender,
    NoWork,
}

/// What a worker does next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Compute(u64),
    Io(IoOp),
    Park(ParkReason),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub wakeups: u64,
    pub spawned: u64,
    pub surrenders: u64,
    pub no_work_parks: u64,
    pub sweeps: u64,
}

/// Dispatch queue, worker pool and counters. Hosts keep it behind whatever
/// exclusion they need; ledgers live outside it.
#[derive(Debug)]
pub struct RuntimeState {
    pub umt: bool,
    pub graph: Arc<TaskGraph>,
    pub queue: DispatchQueue,
    pub pool: WorkerPool,
    pub stats: RuntimeStats,
    scan_start: usize,
}

impl RuntimeState {
    pub fn new(umt: bool, graph: Arc<TaskGraph>, n_cores: usize, max_workers: usize) -> Self {
        let queue = DispatchQueue::new(&graph);
        Self {
            umt,
            graph,
            queue,
            pool: WorkerPool::new(n_cores, max_workers),
            stats: RuntimeStats::default(),
            scan_start: 0,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.queue.is_finished()
    }

    /// Picks workers to resume on cores that have none runnable.
    ///
    /// At most one worker per dispatchable task is resumed, counting
    /// wakes already in flight and `reserve` tasks the caller is about to
    /// take itself. In UMT mode any idle worker may be rebound, and new
    /// workers are spawned up to the cap; the baseline resumes only the
    /// worker bound to the core.
    pub fn plan_wakeups(&mut self, ledgers: &[CoreLedger], reserve: usize) -> Vec<WakeOrder> {
        self.stats.sweeps += 1;
        let in_flight: i64 = ledgers.iter().map(|l| l.pending_wakes().max(0)).sum();
        let mut budget = self.queue.dispatchable() as i64 - reserve as i64 - in_flight;
        let mut orders = Vec::new();
        let n = ledgers.len();
        let start = self.scan_start;
        self.scan_start = (start + 1) % n.max(1);
        for i in 0..n {
            if budget <= 0 {
                break;
            }
            let core = (start + i) % n;
            let ledger = &ledgers[core];
            if !ledger.wants_worker() {
                continue;
            }
            let order = if self.umt {
                if let Some(w) = self.pool.take_idle(core) {
                    WakeOrder {
                        core,
                        worker: w,
                        spawned: false,
                    }
                } else if let Some(w) = self.pool.spawn(core) {
                    self.pool.set_woken_for(w, core);
                    self.stats.spawned += 1;
                    WakeOrder {
                        core,
                        worker: w,
                        spawned: true,
                    }
                } else {
                    break;
                }
            } else {
                match self.pool.take_idle_bound(core) {
                    Some(w) => WakeOrder {
                        core,
                        worker: w,
                        spawned: false,
                    },
                    None => continue,
                }
            };
            if self.umt {
                ledger.add_pending_wake();
            } else {
                ledger.adjust(1);
            }
            self.stats.wakeups += 1;
            budget -= 1;
            orders.push(order);
        }
        orders
    }

    /// Bookkeeping for a worker about to park.
    pub fn park(&mut self, ledgers: &[CoreLedger], worker: WorkerId, reason: ParkReason) {
        let core = self.pool.bound_core(worker);
        self.pool.park(worker);
        match reason {
            ParkReason::Surrender => self.stats.surrenders += 1,
            ParkReason::NoWork => self.stats.no_work_parks += 1,
        }
        if !self.umt {
            ledgers[core].adjust(-1);
        }
    }

    pub fn complete(&mut self, task: TaskId) -> Result<usize, DispatchError> {
        let graph = Arc::clone(&self.graph);
        self.queue.complete(&graph, task)
    }
}

/// Operations a worker needs from its host.
pub trait WorkerHost {
    fn phase(&self, cursor: TaskCursor) -> Option<Phase>;
    /// Scheduling-point check for `core`; always `Continue` in the baseline.
    fn check(&mut self, core: CoreId) -> Verdict;
    /// The first check after a wake for `core` has folded this worker's
    /// own unblock.
    fn settle_wake(&mut self, core: CoreId);
    fn pop_task(&mut self) -> Option<TaskCursor>;
    fn requeue_front(&mut self, cursor: TaskCursor);
    /// Marks the task done, releases successors and resumes workers for
    /// idle cores.
    fn complete(&mut self, task: TaskId);
    fn park(&mut self, reason: ParkReason);
}

/// Per-worker execution state: the task in progress, if any.
#[derive(Debug, Clone, Default)]
pub struct WorkerLogic {
    cursor: Option<TaskCursor>,
    woken_for: Option<CoreId>,
}

impl WorkerLogic {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Option<TaskCursor> {
        self.cursor
    }

    /// Called when the worker resumes after having been woken for `core`.
    pub fn woken(&mut self, core: CoreId) {
        self.woken_for = Some(core);
    }

    fn scheduling_point<H: WorkerHost>(&mut self, core: CoreId, host: &mut H) -> Verdict {
        let v = host.check(core);
        if let Some(c) = self.woken_for.take() {
            host.settle_wake(c);
        }
        v
    }

    pub fn next_step<H: WorkerHost>(&mut self, core: CoreId, host: &mut H) -> Step {
        loop {
            let Some(mut cur) = self.cursor else {
                if self.scheduling_point(core, host) == Verdict::Surrender {
                    host.park(ParkReason::Surrender);
                    return Step::Park(ParkReason::Surrender);
                }
                match host.pop_task() {
                    Some(c) => self.cursor = Some(c),
                    None => {
                        host.park(ParkReason::NoWork);
                        return Step::Park(ParkReason::NoWork);
                    }
                }
                continue;
            };
            match host.phase(cur) {
                None => {
                    self.cursor = None;
                    host.complete(cur.task);
                }
                Some(phase) => {
                    cur.phase += 1;
                    self.cursor = Some(cur);
                    match phase {
                        Phase::Compute(0) => {}
                        Phase::Compute(d) => return Step::Compute(d),
                        Phase::Io(op) => return Step::Io(op),
                        Phase::Yield => {
                            if self.scheduling_point(core, host) == Verdict::Surrender {
                                self.cursor = None;
                                host.requeue_front(cur);
                                host.park(ParkReason::Surrender);
                                return Step::Park(ParkReason::Surrender);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_channel::{EventChannel, OverflowMode};
    use crate::runtime::graph::{IoKind, Layout, Task};

    fn ledgers(n: usize, initial: i64) -> Vec<CoreLedger> {
        (0..n)
            .map(|c| {
                CoreLedger::new(
                    c,
                    Arc::new(EventChannel::new(OverflowMode::Strict)),
                    initial,
                )
            })
            .collect()
    }

    fn graph(n: u32, layout: Layout) -> Arc<TaskGraph> {
        let io = IoOp {
            kind: IoKind::Write,
            duration_us: 50,
        };
        let tasks = (0..n)
            .map(|i| Task::new(TaskId(i), 100, vec![io], layout))
            .collect();
        Arc::new(TaskGraph::new(tasks, vec![]).unwrap())
    }

    #[test]
    fn wakes_only_idle_cores_with_work() {
        let l = ledgers(4, 1);
        let mut st = RuntimeState::new(true, graph(3, Layout::ComputeFirst), 4, 32);
        for c in 0..4 {
            st.pool.spawn(c);
        }
        assert!(st.plan_wakeups(&l, 0).is_empty());

        // core 0's worker blocked
        l[0].channel().record_block().unwrap();
        l[0].drain_and_fold();
        let orders = st.plan_wakeups(&l, 0);
        assert_eq!(
            orders,
            vec![WakeOrder {
                core: 0,
                worker: 4,
                spawned: true
            }]
        );
        assert_eq!(l[0].pending_wakes(), 1);
        // a second sweep does not wake another worker for the same core
        assert!(st.plan_wakeups(&l, 0).is_empty());
    }

    #[test]
    fn no_tasks_no_wake() {
        let l = ledgers(2, 0);
        let mut st = RuntimeState::new(true, graph(0, Layout::ComputeFirst), 2, 16);
        assert!(st.plan_wakeups(&l, 0).is_empty());
    }

    #[test]
    fn budget_limits_wakes_to_ready_tasks() {
        let l = ledgers(4, 0);
        let mut st = RuntimeState::new(true, graph(2, Layout::ComputeFirst), 4, 32);
        assert_eq!(st.plan_wakeups(&l, 0).len(), 2);
        let l = ledgers(4, 0);
        let mut st = RuntimeState::new(true, graph(2, Layout::ComputeFirst), 4, 32);
        assert_eq!(st.plan_wakeups(&l, 1).len(), 1);
    }

    #[test]
    fn baseline_wakes_only_bound_worker() {
        let l = ledgers(2, 1);
        let mut st = RuntimeState::new(false, graph(4, Layout::ComputeFirst), 2, 2);
        let a = st.pool.spawn(0).unwrap();
        st.pool.spawn(1).unwrap();
        st.park(&l, a, ParkReason::NoWork);
        assert_eq!(l[0].ready(), 0);
        let orders = st.plan_wakeups(&l, 0);
        assert_eq!(
            orders,
            vec![WakeOrder {
                core: 0,
                worker: a,
                spawned: false
            }]
        );
        assert_eq!(l[0].ready(), 1);
        assert_eq!(st.pool.max_active_per_core(), 1);
    }

    struct Host {
        st: RuntimeState,
        l: Vec<CoreLedger>,
        parks: Vec<ParkReason>,
    }

    impl WorkerHost for Host {
        fn phase(&self, c: TaskCursor) -> Option<Phase> {
            self.st.graph.task(c.task).phase(c.phase)
        }
        fn check(&mut self, core: CoreId) -> Verdict {
            super::super::ledger::oversubscription_check(&self.l[core])
        }
        fn settle_wake(&mut self, core: CoreId) {
            self.l[core].settle_pending_wake();
        }
        fn pop_task(&mut self) -> Option<TaskCursor> {
            self.st.queue.pop()
        }
        fn requeue_front(&mut self, c: TaskCursor) {
            self.st.queue.requeue_front(c);
        }
        fn complete(&mut self, t: TaskId) {
            self.st.complete(t).unwrap();
        }
        fn park(&mut self, r: ParkReason) {
            self.parks.push(r);
        }
    }

    #[test]
    fn yield_point_surrender_requeues_continuation() {
        let mut h = Host {
            st: RuntimeState::new(true, graph(1, Layout::ComputeYieldIo), 1, 8),
            l: ledgers(1, 1),
            parks: vec![],
        };
        let mut w = WorkerLogic::new();
        assert_eq!(w.next_step(0, &mut h), Step::Compute(100));
        // another worker became runnable on this core meanwhile
        h.l[0].channel().record_unblock().unwrap();
        assert_eq!(w.next_step(0, &mut h), Step::Park(ParkReason::Surrender));
        let resumed = h.st.queue.pop().unwrap();
        assert_eq!(
            resumed,
            TaskCursor {
                task: TaskId(0),
                phase: 2
            }
        );
        assert_eq!(h.st.queue.starts(), &[1]);
    }

    #[test]
    fn runs_phases_then_parks() {
        let mut h = Host {
            st: RuntimeState::new(true, graph(2, Layout::IoFirst), 1, 8),
            l: ledgers(1, 1),
            parks: vec![],
        };
        let mut w = WorkerLogic::new();
        let mut steps = vec![];
        loop {
            let s = w.next_step(0, &mut h);
            steps.push(s);
            if matches!(s, Step::Park(_)) {
                break;
            }
        }
        assert_eq!(steps.len(), 5);
        assert!(matches!(steps[0], Step::Io(_)));
        assert_eq!(steps[1], Step::Compute(100));
        assert_eq!(h.parks, vec![ParkReason::NoWork]);
        assert!(h.st.is_finished());
    }
}
