//! Idle worker pool.

use crate::monitor::CoreId;

pub type WorkerId = usize;

#[derive(Debug, Clone)]
struct Slot {
    bound: CoreId,
    idle: bool,
    woken_for: Option<CoreId>,
}

/// Workers known to the runtime. Idle workers are handed out LIFO.
#[derive(Debug, Clone)]
pub struct WorkerPool {
    slots: Vec<Slot>,
    idle: Vec<WorkerId>,
    max_workers: usize,
    active_per_core: Vec<usize>,
    max_active_per_core: usize,
}

impl WorkerPool {
    pub fn new(n_cores: usize, max_workers: usize) -> Self {
        Self {
            slots: Vec::new(),
            idle: Vec::new(),
            max_workers,
            active_per_core: vec![0; n_cores],
            max_active_per_core: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn idle_count(&self) -> usize {
        self.idle.len()
    }

    pub fn all_idle(&self) -> bool {
        self.idle.len() == self.slots.len()
    }

    pub fn is_idle(&self, w: WorkerId) -> bool {
        self.slots[w].idle
    }

    pub fn bound_core(&self, w: WorkerId) -> CoreId {
        self.slots[w].bound
    }

    /// Largest number of non-idle workers ever bound to one core at once.
    pub fn max_active_per_core(&self) -> usize {
        self.max_active_per_core
    }

    pub fn can_spawn(&self) -> bool {
        self.slots.len() < self.max_workers
    }

    /// Adds an active worker bound to `core`, if under the cap.
    pub fn spawn(&mut self, core: CoreId) -> Option<WorkerId> {
        if !self.can_spawn() {
            return None;
        }
        self.slots.push(Slot {
            bound: core,
            idle: false,
            woken_for: None,
        });
        self.activate(core);
        Some(self.slots.len() - 1)
    }

    fn activate(&mut self, core: CoreId) {
        self.active_per_core[core] += 1;
        self.max_active_per_core = self.max_active_per_core.max(self.active_per_core[core]);
    }

    /// Marks `w` idle.
    ///
    /// # Panics
    /// If `w` is already idle.
    pub fn park(&mut self, w: WorkerId) {
        let slot = &mut self.slots[w];
        assert!(!slot.idle, "worker {w} parked twice");
        slot.idle = true;
        self.active_per_core[slot.bound] -= 1;
        self.idle.push(w);
    }

    /// Takes the most recently parked worker and binds it to `core`.
    pub fn take_idle(&mut self, core: CoreId) -> Option<WorkerId> {
        let w = self.idle.pop()?;
        self.bind_active(w, core);
        Some(w)
    }

    /// Takes the most recently parked worker already bound to `core`.
    pub fn take_idle_bound(&mut self, core: CoreId) -> Option<WorkerId> {
        let pos = self
            .idle
            .iter()
            .rposition(|&w| self.slots[w].bound == core)?;
        let w = self.idle.remove(pos);
        self.bind_active(w, core);
        Some(w)
    }

    fn bind_active(&mut self, w: WorkerId, core: CoreId) {
        let slot = &mut self.slots[w];
        slot.idle = false;
        slot.bound = core;
        slot.woken_for = Some(core);
        self.activate(core);
    }

    /// Returns (and clears) the core `w` was last woken for.
    pub fn take_woken_for(&mut self, w: WorkerId) -> Option<CoreId> {
        self.slots[w].woken_for.take()
    }

    pub fn set_woken_for(&mut self, w: WorkerId, core: CoreId) {
        self.slots[w].woken_for = Some(core);
    }
}
