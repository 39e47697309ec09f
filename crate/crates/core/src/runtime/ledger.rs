//! Per-core ready counters held by the runtime.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use crate::event_channel::{EventBatch, EventChannel};
use crate::monitor::CoreId;

/// The runtime's view of one core: how many of its monitored workers are
/// runnable, according to the events folded so far.
#[derive(Debug)]
pub struct CoreLedger {
    core: CoreId,
    ready: AtomicI64,
    /// Workers woken for this core whose unblock has not been folded yet.
    pending_wakes: AtomicI64,
    channel: Arc<EventChannel>,
}

impl CoreLedger {
    pub fn new(core: CoreId, channel: Arc<EventChannel>, initial: i64) -> Self {
        Self {
            core,
            ready: AtomicI64::new(initial),
            pending_wakes: AtomicI64::new(0),
            channel,
        }
    }

    pub fn core(&self) -> CoreId {
        self.core
    }

    pub fn channel(&self) -> &Arc<EventChannel> {
        &self.channel
    }

    pub fn ready(&self) -> i64 {
        self.ready.load(Ordering::SeqCst)
    }

    pub fn pending_wakes(&self) -> i64 {
        self.pending_wakes.load(Ordering::SeqCst)
    }

    /// Adds `unblocked - blocked`; returns the new count.
    pub fn fold(&self, batch: EventBatch) -> i64 {
        let net = batch.net();
        self.ready.fetch_add(net, Ordering::SeqCst) + net
    }

    pub fn adjust(&self, delta: i64) -> i64 {
        self.ready.fetch_add(delta, Ordering::SeqCst) + delta
    }

    /// Non-blocking drain of this core's channel.
    pub fn drain(&self) -> Option<EventBatch> {
        self.channel.try_drain().ok()
    }

    /// Drains and folds; returns the batch if there was one.
    pub fn drain_and_fold(&self) -> Option<EventBatch> {
        let batch = self.drain()?;
        self.fold(batch);
        Some(batch)
    }

    pub fn add_pending_wake(&self) {
        self.pending_wakes.fetch_add(1, Ordering::SeqCst);
    }

    pub fn settle_pending_wake(&self) {
        self.pending_wakes.fetch_sub(1, Ordering::SeqCst);
    }

    /// Counts a core as idle when no folded-in runnable worker remains and
    /// no wake for it is outstanding.
    pub fn wants_worker(&self) -> bool {
        self.pending_wakes() <= 0 && self.ready() <= 0
    }
}

/// Whether the calling worker keeps its core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Surrender,
}

/// Drains the core's channel, folds it, and asks the caller to surrender
/// if more than one worker is runnable there.
pub fn oversubscription_check(ledger: &CoreLedger) -> Verdict {
    ledger.drain_and_fold();
    verdict(ledger)
}

pub fn verdict(ledger: &CoreLedger) -> Verdict {
    if ledger.ready() > 1 {
        Verdict::Surrender
    } else {
        Verdict::Continue
    }
}

/// Folds every channel that has pending events.
pub fn fold_all(ledgers: &[CoreLedger]) -> usize {
    ledgers
        .iter()
        .filter(|l| l.drain_and_fold().is_some())
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_channel::OverflowMode;

    fn ledger(initial: i64, b: u32, u: u32) -> CoreLedger {
        CoreLedger::new(
            0,
            Arc::new(EventChannel::preloaded(OverflowMode::Strict, b, u)),
            initial,
        )
    }

    #[test]
    fn fold_arithmetic() {
        let l = ledger(1, 1, 0);
        l.drain_and_fold();
        assert_eq!(l.ready(), 0);
        assert!(l.wants_worker());

        let l = ledger(1, 2, 1);
        l.drain_and_fold();
        assert_eq!(l.ready(), 0);
    }

    #[test]
    fn check_verdicts() {
        assert_eq!(oversubscription_check(&ledger(1, 0, 1)), Verdict::Surrender);
        assert_eq!(oversubscription_check(&ledger(1, 0, 0)), Verdict::Continue);
        let l = ledger(1, 0, 0);
        assert_eq!(l.drain(), None);
        assert_eq!(oversubscription_check(&l), Verdict::Continue);
        assert_eq!(l.ready(), 1);
    }

    #[test]
    fn pending_wake_suppresses_want() {
        let l = ledger(0, 0, 0);
        l.add_pending_wake();
        assert!(!l.wants_worker());
        l.settle_pending_wake();
        assert!(l.wants_worker());
    }
}
