//! Per-core block/unblock notification channel with eventfd read semantics.
//!
//! A channel is a single 64-bit counter split in two halves: the low 32 bits
//! count threads that blocked on the core since the last read, the high 32
//! bits count threads that unblocked. Reading returns both counts and clears
//! the counter in one atomic step. A blocking read parks until the counter
//! is nonzero.
//!
//! ```
//! use umt::event_channel::{EventChannel, OverflowMode};
//!
//! let chan = EventChannel::new(OverflowMode::Strict);
//! chan.record_block().unwrap();
//! chan.record_block().unwrap();
//! chan.record_unblock().unwrap();
//! let batch = chan.try_drain().unwrap();
//! assert_eq!((batch.blocked, batch.unblocked), (2, 1));
//! assert!(chan.try_drain().is_err());
//! ```

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of each half of the packed counter.
pub const HALF_BITS: u32 = 32;
const LOW_MASK: u64 = (1 << HALF_BITS) - 1;
const UNBLOCK_UNIT: u64 = 1 << HALF_BITS;

/// Default `wait_any` timeout: the leader's periodic scan interval.
pub const DEFAULT_WAIT_TIMEOUT: Duration = Duration::from_millis(1);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    /// A half reached 2^32 (strict mode), or `pack` was given an oversized count.
    #[error("{half} counter overflow")]
    Overflow { half: Half },
    /// Non-blocking drain found the counter at zero.
    #[error("channel is empty")]
    WouldBlock,
    /// A second blocking reader tried to park on the same channel.
    #[error("another blocking reader is already parked on this channel")]
    ReaderBusy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    Blocked,
    Unblocked,
}

impl std::fmt::Display for Half {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Half::Blocked => f.write_str("blocked"),
            Half::Unblocked => f.write_str("unblocked"),
        }
    }
}

/// What happens when a half of the counter is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverflowMode {
    /// Refuse the increment with [`ChannelError::Overflow`].
    #[default]
    Strict,
    /// Plain 64-bit additive increments: a full blocked half carries into the
    /// unblocked half, a full unblocked half wraps to zero.
    PaperFaithful,
}

/// Block and unblock counts accumulated since the previous read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct EventBatch {
    pub blocked: u32,
    pub unblocked: u32,
}

impl EventBatch {
    pub fn new(blocked: u32, unblocked: u32) -> Self {
        Self { blocked, unblocked }
    }

    /// `unblocked - blocked`: the change in the number of ready threads.
    pub fn net(&self) -> i64 {
        i64::from(self.unblocked) - i64::from(self.blocked)
    }

    pub fn is_empty(&self) -> bool {
        self.blocked == 0 && self.unblocked == 0
    }
}

/// Packs two counts into the 64-bit layout. Blocked occupies the low half.
pub fn pack(blocked: u64, unblocked: u64) -> Result<u64, ChannelError> {
    if blocked > LOW_MASK {
        return Err(ChannelError::Overflow {
            half: Half::Blocked,
        });
    }
    if unblocked > LOW_MASK {
        return Err(ChannelError::Overflow {
            half: Half::Unblocked,
        });
    }
    Ok(blocked | (unblocked << HALF_BITS))
}

pub fn unpack(packed: u64) -> EventBatch {
    EventBatch {
        blocked: (packed & LOW_MASK) as u32,
        unblocked: (packed >> HALF_BITS) as u32,
    }
}

/// Wake-up point shared between a channel and anything waiting on it.
///
/// Several channels may share one signal so that a multiplexed wait
/// ([`wait_any`]) is woken by a write to any of them.
#[derive(Debug, Default)]
pub struct Signal {
    waiters: AtomicUsize,
    lock: Mutex<()>,
    cond: Condvar,
}

impl Signal {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn notify(&self) {
        if self.waiters.load(Ordering::SeqCst) > 0 {
            let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
            self.cond.notify_all();
        }
    }

    /// Waits until `ready` returns `Some`, or until `deadline` passes.
    fn wait_until<T>(
        &self,
        deadline: Option<Instant>,
        mut ready: impl FnMut() -> Option<T>,
    ) -> Option<T> {
        if let Some(v) = ready() {
            return Some(v);
        }
        let mut guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        self.waiters.fetch_add(1, Ordering::SeqCst);
        let out = loop {
            if let Some(v) = ready() {
                break Some(v);
            }
            match deadline {
                None => {
                    guard = self.cond.wait(guard).unwrap_or_else(|e| e.into_inner());
                }
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        break None;
                    }
                    guard = self
                        .cond
                        .wait_timeout(guard, deadline - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            }
        };
        self.waiters.fetch_sub(1, Ordering::SeqCst);
        drop(guard);
        out
    }
}

/// Emulated UMT eventfd.
#[derive(Debug)]
pub struct EventChannel {
    packed: AtomicU64,
    mode: OverflowMode,
    reader_parked: AtomicBool,
    signal: Arc<Signal>,
}

impl EventChannel {
    pub fn new(mode: OverflowMode) -> Self {
        Self::with_signal(mode, Signal::new())
    }

    pub fn with_signal(mode: OverflowMode, signal: Arc<Signal>) -> Self {
        Self {
            packed: AtomicU64::new(0),
            mode,
            reader_parked: AtomicBool::new(false),
            signal,
        }
    }

    /// Channel whose counter already holds the given counts. Used to probe
    /// the overflow boundary without recording four billion events.
    pub fn preloaded(mode: OverflowMode, blocked: u32, unblocked: u32) -> Self {
        let chan = Self::new(mode);
        chan.packed.store(
            u64::from(blocked) | (u64::from(unblocked) << HALF_BITS),
            Ordering::SeqCst,
        );
        chan
    }

    pub fn mode(&self) -> OverflowMode {
        self.mode
    }

    pub fn signal(&self) -> &Arc<Signal> {
        &self.signal
    }

    /// Counts currently pending, without clearing them.
    pub fn peek(&self) -> EventBatch {
        unpack(self.packed.load(Ordering::SeqCst))
    }

    pub fn is_pending(&self) -> bool {
        self.packed.load(Ordering::SeqCst) != 0
    }

    pub fn record_block(&self) -> Result<(), ChannelError> {
        self.increment(Half::Blocked)
    }

    pub fn record_unblock(&self) -> Result<(), ChannelError> {
        self.increment(Half::Unblocked)
    }

    fn increment(&self, half: Half) -> Result<(), ChannelError> {
        let unit = match half {
            Half::Blocked => 1,
            Half::Unblocked => UNBLOCK_UNIT,
        };
        match self.mode {
            OverflowMode::PaperFaithful => {
                self.packed.fetch_add(unit, Ordering::SeqCst);
            }
            OverflowMode::Strict => {
                self.packed
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| {
                        let current = match half {
                            Half::Blocked => v & LOW_MASK,
                            Half::Unblocked => v >> HALF_BITS,
                        };
                        (current < LOW_MASK).then(|| v + unit)
                    })
                    .map_err(|_| ChannelError::Overflow { half })?;
            }
        }
        self.signal.notify();
        Ok(())
    }

    /// Reads and clears the counter. Returns [`ChannelError::WouldBlock`] when empty.
    pub fn try_drain(&self) -> Result<EventBatch, ChannelError> {
        match self.packed.swap(0, Ordering::SeqCst) {
            0 => Err(ChannelError::WouldBlock),
            v => Ok(unpack(v)),
        }
    }

    /// Reads and clears the counter, parking until it is nonzero.
    pub fn drain_blocking(&self) -> Result<EventBatch, ChannelError> {
        self.drain_deadline(None).map(|b| b.expect("no deadline"))
    }

    /// Like [`drain_blocking`](Self::drain_blocking) but gives up after `timeout`,
    /// returning `Ok(None)`.
    pub fn drain_timeout(&self, timeout: Duration) -> Result<Option<EventBatch>, ChannelError> {
        self.drain_deadline(Some(Instant::now() + timeout))
    }

    pub fn drain(&self, blocking: bool) -> Result<EventBatch, ChannelError> {
        if blocking {
            self.drain_blocking()
        } else {
            self.try_drain()
        }
    }

    fn drain_deadline(
        &self,
        deadline: Option<Instant>,
    ) -> Result<Option<EventBatch>, ChannelError> {
        if self
            .reader_parked
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            return Err(ChannelError::ReaderBusy);
        }
        let out = self.signal.wait_until(deadline, || self.try_drain().ok());
        self.reader_parked.store(false, Ordering::SeqCst);
        Ok(out)
    }
}

/// A fixed set of channels sharing one wake-up signal, one per core.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    channels: Vec<Arc<EventChannel>>,
    signal: Arc<Signal>,
}

impl ChannelSet {
    pub fn new(n: usize, mode: OverflowMode) -> Self {
        let signal = Signal::new();
        let channels = (0..n)
            .map(|_| Arc::new(EventChannel::with_signal(mode, Arc::clone(&signal))))
            .collect();
        Self { channels, signal }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Arc<EventChannel>> {
        self.channels.get(id)
    }

    pub fn channels(&self) -> &[Arc<EventChannel>] {
        &self.channels
    }

    /// Ids of channels with a nonzero counter, in ascending order.
    pub fn pending(&self) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_pending())
            .map(|(i, _)| i)
            .collect()
    }
}

impl std::ops::Index<usize> for ChannelSet {
    type Output = EventChannel;

    fn index(&self, id: usize) -> &EventChannel {
        &self.channels[id]
    }
}

/// Level-triggered multiplexed wait over a channel set.
///
/// Returns the ids of every channel whose counter is nonzero, waiting up to
/// `timeout` for at least one. Counts are not consumed. An empty result means
/// the timeout elapsed.
pub fn wait_any(set: &ChannelSet, timeout: Duration) -> Vec<usize> {
    let deadline = Instant::now() + timeout;
    set.signal
        .wait_until(Some(deadline), || {
            let ids = set.pending();
            (!ids.is_empty()).then_some(ids)
        })
        .unwrap_or_default()
}
