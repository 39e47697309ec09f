//! Kernel-side event policy: which context switches produce block/unblock
//! events, and on which core's channel.
//!
//! The rules are applied at two hooks around a context switch:
//!
//! * switch-out: a monitored thread that is about to block writes a block
//!   event on its current core. A preempted thread writes nothing.
//! * switch-in: a monitored thread resuming after having blocked writes an
//!   unblock event on the core it now runs on. If the thread was preempted on
//!   another core and migrated while ready, the block it never wrote is
//!   written on the old core first, and the matching unblock on the new one.
//!
//! The same record type is used by the simulator (through [`MonitorTable`])
//! and by live workers, which own their [`ThreadRecord`] and only share the
//! channels.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::event_channel::{ChannelError, ChannelSet, EventChannel, OverflowMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThreadId(pub u32);

impl std::fmt::Display for ThreadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "T{}", self.0)
    }
}

pub type CoreId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedState {
    Running,
    Ready,
    Blocked,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MonitorError {
    #[error("monitoring is already enabled for this process")]
    AlreadyEnabled,
    #[error("monitoring is not enabled")]
    NotEnabled,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("unknown thread {0}")]
    UnknownThread(ThreadId),
    #[error("core {core} out of range (n_cores = {n_cores})")]
    BadCore { core: CoreId, n_cores: usize },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Which half of a channel an event went to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Block,
    Unblock,
}

/// One channel write made by a hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Emitted {
    pub core: CoreId,
    pub kind: EventKind,
    /// Written by migration compensation rather than by a real block/unblock.
    pub compensation: bool,
}

/// Channel writes made by one hook invocation (at most two).
pub type EmittedEvents = SmallVec<[Emitted; 2]>;

/// A thread's kernel-visible state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadRecord {
    pub id: ThreadId,
    pub sched_state: SchedState,
    pub core: CoreId,
    pub last_core: CoreId,
    pub monitored: bool,
    /// Set when the last switch-out was a preemption: if the thread resumes
    /// on another core, the old core never saw it leave.
    pub missed_block_pending: bool,
}

impl ThreadRecord {
    pub fn new(id: ThreadId, core: CoreId, sched_state: SchedState) -> Self {
        Self {
            id,
            sched_state,
            core,
            last_core: core,
            monitored: false,
            missed_block_pending: false,
        }
    }

    pub fn switch_out(
        &mut self,
        channels: &[Arc<EventChannel>],
        next_state: SchedState,
    ) -> Result<EmittedEvents, MonitorError> {
        let mut out = EmittedEvents::new();
        match next_state {
            SchedState::Blocked => {
                if self.monitored {
                    channel(channels, self.core)?.record_block()?;
                    out.push(Emitted {
                        core: self.core,
                        kind: EventKind::Block,
                        compensation: false,
                    });
                }
                self.missed_block_pending = false;
            }
            SchedState::Ready => self.missed_block_pending = true,
            SchedState::Running => {}
        }
        self.sched_state = next_state;
        self.last_core = self.core;
        Ok(out)
    }

    pub fn switch_in(
        &mut self,
        channels: &[Arc<EventChannel>],
        was_blocked: bool,
        now_on_core: CoreId,
    ) -> Result<EmittedEvents, MonitorError> {
        channel(channels, now_on_core)?;
        let mut out = if self.last_core != now_on_core {
            self.migration_check(channels, now_on_core)?
        } else {
            EmittedEvents::new()
        };
        if self.monitored && was_blocked {
            channels[now_on_core].record_unblock()?;
            out.push(Emitted {
                core: now_on_core,
                kind: EventKind::Unblock,
                compensation: false,
            });
        }
        self.core = now_on_core;
        self.last_core = now_on_core;
        self.sched_state = SchedState::Running;
        self.missed_block_pending = false;
        Ok(out)
    }

    /// Writes the block the old core missed and the matching unblock on the
    /// new one, when the thread left `last_core` preempted.
    pub fn migration_check(
        &mut self,
        channels: &[Arc<EventChannel>],
        new_core: CoreId,
    ) -> Result<EmittedEvents, MonitorError> {
        let mut out = EmittedEvents::new();
        if self.last_core == new_core || !self.missed_block_pending {
            return Ok(out);
        }
        if self.monitored {
            channel(channels, self.last_core)?.record_block()?;
            channel(channels, new_core)?.record_unblock()?;
            out.push(Emitted {
                core: self.last_core,
                kind: EventKind::Block,
                compensation: true,
            });
            out.push(Emitted {
                core: new_core,
                kind: EventKind::Unblock,
                compensation: true,
            });
        }
        self.missed_block_pending = false;
        self.last_core = new_core;
        Ok(out)
    }
}

fn channel(channels: &[Arc<EventChannel>], core: CoreId) -> Result<&EventChannel, MonitorError> {
    channels
        .get(core)
        .map(|c| &**c)
        .ok_or(MonitorError::BadCore {
            core,
            n_cores: channels.len(),
        })
}

/// Per-process monitoring state: one channel per core plus every thread's record.
#[derive(Debug, Clone)]
pub struct MonitorTable {
    channels: ChannelSet,
    threads: BTreeMap<ThreadId, ThreadRecord>,
}

impl MonitorTable {
    pub fn channels(&self) -> &ChannelSet {
        &self.channels
    }

    pub fn n_cores(&self) -> usize {
        self.channels.len()
    }

    /// Makes a thread known to the table (unmonitored until registered).
    pub fn add_thread(&mut self, record: ThreadRecord) -> Result<(), MonitorError> {
        if record.core >= self.n_cores() {
            return Err(MonitorError::BadCore {
                core: record.core,
                n_cores: self.n_cores(),
            });
        }
        self.threads.insert(record.id, record);
        Ok(())
    }

    pub fn thread(&self, id: ThreadId) -> Option<&ThreadRecord> {
        self.threads.get(&id)
    }

    pub fn threads(&self) -> impl Iterator<Item = &ThreadRecord> {
        self.threads.values()
    }

    fn record_mut(&mut self, id: ThreadId) -> Result<&mut ThreadRecord, MonitorError> {
        self.threads
            .get_mut(&id)
            .ok_or(MonitorError::UnknownThread(id))
    }

    pub fn register_thread(&mut self, id: ThreadId, enable: bool) -> Result<(), MonitorError> {
        self.record_mut(id)?.monitored = enable;
        Ok(())
    }

    pub fn on_switch_out(
        &mut self,
        id: ThreadId,
        next_state: SchedState,
    ) -> Result<EmittedEvents, MonitorError> {
        let record = self
            .threads
            .get_mut(&id)
            .ok_or(MonitorError::UnknownThread(id))?;
        record.switch_out(self.channels.channels(), next_state)
    }

    pub fn on_switch_in(
        &mut self,
        id: ThreadId,
        was_blocked: bool,
        now_on_core: CoreId,
    ) -> Result<EmittedEvents, MonitorError> {
        let record = self
            .threads
            .get_mut(&id)
            .ok_or(MonitorError::UnknownThread(id))?;
        record.switch_in(self.channels.channels(), was_blocked, now_on_core)
    }

    pub fn on_migration_check(
        &mut self,
        id: ThreadId,
        new_core: CoreId,
    ) -> Result<EmittedEvents, MonitorError> {
        let record = self
            .threads
            .get_mut(&id)
            .ok_or(MonitorError::UnknownThread(id))?;
        record.migration_check(self.channels.channels(), new_core)
    }
}

/// Process context in which monitoring can be enabled once.
#[derive(Debug, Default)]
pub struct UmtProcess {
    table: Option<MonitorTable>,
}

impl UmtProcess {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates one zeroed channel per core. Fails if already enabled.
    pub fn enable_monitoring(
        &mut self,
        n_cores: usize,
        mode: OverflowMode,
    ) -> Result<&mut MonitorTable, MonitorError> {
        if self.table.is_some() {
            return Err(MonitorError::AlreadyEnabled);
        }
        if n_cores == 0 {
            return Err(MonitorError::InvalidArgument("n_cores must be at least 1"));
        }
        Ok(self.table.insert(MonitorTable {
            channels: ChannelSet::new(n_cores, mode),
            threads: BTreeMap::new(),
        }))
    }

    pub fn table(&self) -> Option<&MonitorTable> {
        self.table.as_ref()
    }

    pub fn table_mut(&mut self) -> Result<&mut MonitorTable, MonitorError> {
        self.table.as_mut().ok_or(MonitorError::NotEnabled)
    }
}
