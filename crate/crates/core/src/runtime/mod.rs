//! Task runtime: per-core ledgers fed by channel events, a leader that
//! refills idle cores from a worker pool, and workers that surrender their
//! core at scheduling points when it is oversubscribed.
//!
//! The decision logic lives in [`logic`] and runs unchanged on two hosts:
//! [`run_sim`] inside the simulator, and [`run_live`] on real threads.

pub mod graph;
pub mod ledger;
pub mod live;
pub mod logic;
pub mod pool;
mod simhost;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsReport;
use crate::sim::{AuditReport, SimError, SimStats};
use crate::trace::TraceRecord;

pub use graph::{IoKind, IoOp, Layout, Task, TaskGraph, TaskId};
pub use ledger::{oversubscription_check, CoreLedger, Verdict};
pub use live::{run_live, LiveConfig};
pub use logic::{ParkReason, RuntimeState, RuntimeStats, Step, WakeOrder, WorkerHost, WorkerLogic};
pub use pool::{WorkerId, WorkerPool};
pub use simhost::run_sim;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub umt_enabled: bool,
    /// Leader periodic scan interval.
    pub leader_timeout_us: u64,
    pub max_workers_per_core: usize,
    /// Probability that a worker's drained batch is folded only at its next
    /// scheduling point instead of immediately (fault injection).
    pub stale_fold_probability: f64,
    /// Seed for fault injection decisions.
    pub seed: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            umt_enabled: true,
            leader_timeout_us: 1000,
            max_workers_per_core: 8,
            stale_fold_probability: 0.0,
            seed: 0,
        }
    }
}

impl RuntimeConfig {
    pub fn umt(enabled: bool) -> Self {
        Self {
            umt_enabled: enabled,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.leader_timeout_us == 0 {
            return Err(RuntimeError::Config(
                "leader timeout must be positive".into(),
            ));
        }
        if self.max_workers_per_core == 0 {
            return Err(RuntimeError::Config(
                "max_workers_per_core must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.stale_fold_probability) {
            return Err(RuntimeError::Config(format!(
                "stale_fold_probability {} outside [0, 1]",
                self.stale_fold_probability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("runtime config: {0}")]
    Config(String),
    #[error("stalled at t={at_us}us with {completed}/{total} tasks complete")]
    Stalled {
        completed: usize,
        total: usize,
        at_us: u64,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dispatch(#[from] graph::DispatchError),
    #[error("live run: {0}")]
    Live(String),
}

/// Everything a completed run produces.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub metrics: MetricsReport,
    pub trace: Vec<TraceRecord>,
    /// Ledger values after a final drain of every channel.
    pub final_ledgers: Vec<i64>,
    /// Runnable monitored workers per core at the end (simulator only;
    /// all zero for live runs, where every worker has exited).
    pub ground_truth: Vec<i64>,
    pub task_starts: Vec<u32>,
    pub task_completions: Vec<u32>,
    pub max_active_per_core: usize,
    pub stats: RuntimeStats,
    pub audit: Option<AuditReport>,
    pub sim_stats: Option<SimStats>,
}

impl RunReport {
    pub fn all_tasks_once(&self) -> bool {
        self.task_starts.iter().all(|&s| s == 1) && self.task_completions.iter().all(|&c| c == 1)
    }

    pub fn ledgers_exact(&self) -> bool {
        self.final_ledgers == self.ground_truth
    }
}
