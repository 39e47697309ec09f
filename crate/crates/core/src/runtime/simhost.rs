//! Runs the runtime inside the simulator.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::event_channel::EventBatch;
use crate::metrics::MetricsReport;
use crate::monitor::{CoreId, ThreadId};
use crate::sim::{Action, LeaderBody, LeaderControl, Sim, SimConfig, SimCtx, ThreadBody};
use crate::trace::{Extra, TraceKind};

use super::graph::{Phase, TaskCursor, TaskGraph, TaskId};
use super::ledger::{fold_all, verdict, CoreLedger, Verdict};
use super::logic::{ParkReason, RuntimeState, Step, WakeOrder, WorkerHost, WorkerLogic};
use super::pool::WorkerId;
use super::{RunReport, RuntimeConfig, RuntimeError};

struct Shared {
    cfg: RuntimeConfig,
    state: RuntimeState,
    ledgers: Vec<CoreLedger>,
    tids: Vec<ThreadId>,
    rng: ChaCha8Rng,
    /// Batches drained by a worker but not yet folded, per worker.
    deferred: Vec<Vec<(CoreId, EventBatch)>>,
    finished_at: Option<u64>,
    error: Option<RuntimeError>,
}

type SharedRc = Rc<RefCell<Shared>>;

impl Shared {
    fn execute(&mut self, rc: &SharedRc, ctx: &mut SimCtx<'_>, orders: Vec<WakeOrder>) {
        for o in orders {
            if let Err(e) = self.execute_one(rc, ctx, o) {
                self.error.get_or_insert(e);
            }
        }
    }

    fn execute_one(
        &mut self,
        rc: &SharedRc,
        ctx: &mut SimCtx<'_>,
        o: WakeOrder,
    ) -> Result<(), RuntimeError> {
        if o.spawned {
            debug_assert_eq!(o.worker, self.tids.len());
            let body = SimWorker::new(Rc::clone(rc), o.worker, true);
            let tid = ctx.spawn_parked(o.core, Box::new(body))?;
            if self.state.umt {
                ctx.register_thread(tid, true)?;
            }
            self.tids.push(tid);
            self.deferred.push(Vec::new());
        }
        ctx.wake(self.tids[o.worker], o.core)?;
        Ok(())
    }

    fn flush_deferred(&mut self, worker: WorkerId) {
        for (core, batch) in self.deferred[worker].drain(..) {
            self.ledgers[core].fold(batch);
        }
    }
}

struct Host<'a, 'k> {
    sh: &'a mut Shared,
    rc: &'a SharedRc,
    ctx: &'a mut SimCtx<'k>,
    worker: WorkerId,
}

impl WorkerHost for Host<'_, '_> {
    fn phase(&self, cursor: TaskCursor) -> Option<Phase> {
        self.sh.state.graph.task(cursor.task).phase(cursor.phase)
    }

    fn check(&mut self, core: CoreId) -> Verdict {
        if !self.sh.state.umt {
            return Verdict::Continue;
        }
        self.sh.flush_deferred(self.worker);
        let ledger = &self.sh.ledgers[core];
        if let Some(batch) = ledger.drain() {
            let p = self.sh.cfg.stale_fold_probability;
            if p > 0.0 && self.sh.rng.gen_bool(p) {
                self.sh.deferred[self.worker].push((core, batch));
            } else {
                ledger.fold(batch);
            }
        }
        verdict(&self.sh.ledgers[core])
    }

    fn settle_wake(&mut self, core: CoreId) {
        if self.sh.state.umt {
            self.sh.ledgers[core].settle_pending_wake();
        }
    }

    fn pop_task(&mut self) -> Option<TaskCursor> {
        self.sh.state.queue.pop()
    }

    fn requeue_front(&mut self, cursor: TaskCursor) {
        self.sh.state.queue.requeue_front(cursor);
    }

    fn complete(&mut self, task: TaskId) {
        let released = match self.sh.state.complete(task) {
            Ok(r) => r,
            Err(e) => {
                self.sh.error.get_or_insert(e.into());
                return;
            }
        };
        if self.sh.state.is_finished() {
            self.sh.finished_at = Some(self.ctx.now());
            self.ctx.stop_leader();
            return;
        }
        if released > 0 {
            if self.sh.state.umt {
                fold_all(&self.sh.ledgers);
            }
            let orders = self.sh.state.plan_wakeups(&self.sh.ledgers, 1);
            self.sh.execute(self.rc, self.ctx, orders);
        }
    }

    fn park(&mut self, reason: ParkReason) {
        self.sh.flush_deferred(self.worker);
        self.sh.state.park(&self.sh.ledgers, self.worker, reason);
    }
}

struct SimWorker {
    rc: SharedRc,
    id: WorkerId,
    logic: WorkerLogic,
    parked: bool,
}

impl SimWorker {
    fn new(rc: SharedRc, id: WorkerId, parked: bool) -> Self {
        Self {
            rc,
            id,
            logic: WorkerLogic::new(),
            parked,
        }
    }
}

impl ThreadBody for SimWorker {
    fn next_action(&mut self, ctx: &mut SimCtx<'_>) -> Action {
        let rc = Rc::clone(&self.rc);
        let mut guard = rc.borrow_mut();
        let sh = &mut *guard;
        if std::mem::take(&mut self.parked) {
            if let Some(core) = sh.state.pool.take_woken_for(self.id) {
                self.logic.woken(core);
            }
        }
        let core = ctx.core();
        let step = {
            let mut host = Host {
                sh,
                rc: &rc,
                ctx,
                worker: self.id,
            };
            self.logic.next_step(core, &mut host)
        };
        match step {
            Step::Compute(d) => Action::Compute(d),
            Step::Io(op) => Action::Block(op.duration_us),
            Step::Park(reason) => {
                if reason == ParkReason::Surrender {
                    let tid = ctx.current().expect("worker body");
                    ctx.trace(core, tid, TraceKind::Surrender, Extra::default());
                }
                self.parked = true;
                Action::Park
            }
        }
    }
}

struct SimLeader {
    rc: SharedRc,
}

impl LeaderBody for SimLeader {
    fn on_timer(&mut self, ctx: &mut SimCtx<'_>, _periodic: bool) -> LeaderControl {
        let rc = Rc::clone(&self.rc);
        let mut guard = rc.borrow_mut();
        let sh = &mut *guard;
        if sh.finished_at.is_some() {
            return LeaderControl::Stop;
        }
        if sh.state.umt {
            fold_all(&sh.ledgers);
        }
        let orders = sh.state.plan_wakeups(&sh.ledgers, 0);
        sh.execute(&rc, ctx, orders);
        LeaderControl::Continue
    }
}

/// Simulated time after which a run that has not finished counts as stalled.
pub fn liveness_bound_us(graph: &TaskGraph, cfg: &RuntimeConfig) -> u64 {
    2 * (graph.total_compute_us() + graph.total_io_us()) + 10 * cfg.leader_timeout_us + 1000
}

/// Runs `graph` to completion on the simulator.
pub fn run_sim(
    graph: Arc<TaskGraph>,
    cfg: &RuntimeConfig,
    sim_cfg: SimConfig,
) -> Result<RunReport, RuntimeError> {
    cfg.validate()?;
    let n = sim_cfg.n_cores;
    let mut sim = Sim::new(sim_cfg)?;
    let umt = cfg.umt_enabled;
    let ledgers = (0..n)
        .map(|c| CoreLedger::new(c, Arc::clone(&sim.monitor().channels().channels()[c]), 0))
        .collect();
    let limit = liveness_bound_us(&graph, cfg);
    let total = graph.len();
    let rc: SharedRc = Rc::new(RefCell::new(Shared {
        state: RuntimeState::new(umt, Arc::clone(&graph), n, cfg.max_workers_per_core * n),
        ledgers,
        tids: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        deferred: Vec::new(),
        finished_at: graph.is_empty().then_some(0),
        error: None,
        cfg: cfg.clone(),
    }));

    // Workers start parked and are woken on their cores, so each start is
    // an unblock and the ledgers begin at zero with one wake outstanding.
    for core in 0..n {
        let mut sh = rc.borrow_mut();
        let w = sh
            .state
            .pool
            .spawn(core)
            .ok_or_else(|| RuntimeError::Config("worker cap below core count".into()))?;
        sh.state.pool.set_woken_for(w, core);
        let tid = sim.spawn_parked(core, SimWorker::new(Rc::clone(&rc), w, true))?;
        if umt {
            sim.register_thread(tid, true)?;
            sh.ledgers[core].add_pending_wake();
        } else {
            sh.ledgers[core].adjust(1);
        }
        sh.tids.push(tid);
        sh.deferred.push(Vec::new());
        drop(sh);
        sim.wake(tid, core)?;
    }
    if !graph.is_empty() {
        sim.set_leader(
            SimLeader { rc: Rc::clone(&rc) },
            Some(cfg.leader_timeout_us),
        );
    }

    let drained = sim.run_bounded(limit)?;
    let mut sh = rc.borrow_mut();
    if let Some(e) = sh.error.take() {
        return Err(e);
    }
    let Some(makespan) = sh.finished_at.filter(|_| drained) else {
        return Err(RuntimeError::Stalled {
            completed: sh.state.queue.completed(),
            total,
            at_us: sim.now(),
        });
    };

    fold_all(&sh.ledgers);
    let final_ledgers = sh.ledgers.iter().map(CoreLedger::ready).collect();
    let ground_truth = if umt {
        sim.ground_truth_ready()
    } else {
        // baseline workers are unmonitored; count them directly
        let mut v = vec![0i64; n];
        for &tid in &sh.tids {
            if matches!(
                sim.thread_state(tid),
                Some(crate::sim::ThreadState::Running | crate::sim::ThreadState::Ready { .. })
            ) {
                v[sim.thread_core(tid).unwrap_or(0)] += 1;
            }
        }
        v
    };
    let st = sim.stats().clone();
    let metrics = MetricsReport {
        context_switches: st.context_switches,
        leader_wakeups: st.leader_wakeups,
        makespan_us: makespan,
        events_blocked: st.blocked_events,
        events_unblocked: st.unblocked_events,
        workers: sh.state.pool.len(),
        surrenders: sh.state.stats.surrenders,
        tasks: total,
        ..MetricsReport::default()
    }
    .with_clock(sim.clock());

    Ok(RunReport {
        metrics,
        trace: sim.take_trace(),
        final_ledgers,
        ground_truth,
        task_starts: sh.state.queue.starts().to_vec(),
        task_completions: sh.state.queue.completions().to_vec(),
        max_active_per_core: sh.state.pool.max_active_per_core(),
        stats: sh.state.stats.clone(),
        audit: Some(sim.audit().clone()),
        sim_stats: Some(st),
    })
}
