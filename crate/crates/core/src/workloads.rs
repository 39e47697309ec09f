//! Synthetic task graphs: a slice pipeline, a blocked wavefront stencil with
//! periodic checkpoints, and a bag of independent compute+I/O tasks.
//!
//! Specs are plain TOML key/value files:
//!
//! ```toml
//! id = "heat-iof15"
//! kind = "wavefront"       # pipeline | wavefront | independent-mix
//! iterations = 45
//! rows = 16
//! cols = 16
//! compute_us = 200
//! io_us = 3000
//! io_frequency = 15        # iterations 15, 30, ... write
//! layout = "compute-first" # io-first | compute-first | compute-yield-io | io-yield-compute
//! seed = 1
//! io_jitter_us = 0         # I/O durations drawn from io_us ± jitter
//! ```
//!
//! Pipeline specs use `timesteps`, `slices`, `backward` and `halo_us`;
//! independent mixes use `tasks`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::graph::{GraphError, IoKind, IoOp, Layout, Task, TaskGraph, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    Pipeline,
    Wavefront,
    IndependentMix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_id")]
    pub id: String,
    pub kind: WorkloadKind,
    #[serde(default)]
    pub tasks: usize,
    #[serde(default = "one")]
    pub iterations: usize,
    #[serde(default = "one")]
    pub rows: usize,
    #[serde(default = "one")]
    pub cols: usize,
    #[serde(default = "one")]
    pub timesteps: usize,
    #[serde(default = "one")]
    pub slices: usize,
    #[serde(default)]
    pub backward: bool,
    #[serde(default)]
    pub halo_us: u64,
    pub compute_us: u64,
    pub io_us: u64,
    #[serde(default = "one")]
    pub io_frequency: usize,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub io_jitter_us: u64,
}

fn default_id() -> String {
    "workload".into()
}

fn one() -> usize {
    1
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl WorkloadSpec {
    /// An independent mix with the given shape and default everything else.
    pub fn independent_mix(tasks: usize, compute_us: u64, io_us: u64, layout: Layout) -> Self {
        Self {
            id: default_id(),
            kind: WorkloadKind::IndependentMix,
            tasks,
            iterations: 1,
            rows: 1,
            cols: 1,
            timesteps: 1,
            slices: 1,
            backward: false,
            halo_us: 0,
            compute_us,
            io_us,
            io_frequency: 1,
            layout,
            seed: 0,
            io_jitter_us: 0,
        }
    }

    pub fn wavefront(
        iterations: usize,
        rows: usize,
        cols: usize,
        compute_us: u64,
        io_us: u64,
        iof: usize,
    ) -> Self {
        Self {
            kind: WorkloadKind::Wavefront,
            iterations,
            rows,
            cols,
            io_frequency: iof,
            ..Self::independent_mix(0, compute_us, io_us, Layout::ComputeFirst)
        }
    }

    pub fn pipeline(
        timesteps: usize,
        slices: usize,
        compute_us: u64,
        io_us: u64,
        iof: usize,
    ) -> Self {
        Self {
            kind: WorkloadKind::Pipeline,
            timesteps,
            slices,
            io_frequency: iof,
            ..Self::independent_mix(0, compute_us, io_us, Layout::ComputeFirst)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, WorkloadError> {
        Self::parse(text, "<string>")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorkloadError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| WorkloadError::Io {
            path: shown.clone(),
            source,
        })?;
        Self::parse(&text, &shown)
    }

    fn parse(text: &str, path: &str) -> Result<Self, WorkloadError> {
        let spec: Self = toml::from_str(text).map_err(|e| WorkloadError::Parse {
            path: path.to_owned(),
            message: e.to_string().trim_end().to_owned(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Fails for values TOML cannot hold, such as a seed above `i64::MAX`.
    pub fn to_toml_string(&self) -> Result<String, WorkloadError> {
        toml::to_string(self).map_err(|e| WorkloadError::InvalidSpec(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidSpec(m.to_owned()));
        if self.compute_us == 0 {
            return bad("compute_us must be positive");
        }
        if self.io_us == 0 {
            return bad("io_us must be positive");
        }
        if self.io_frequency == 0 {
            return bad("io_frequency must be at least 1");
        }
        if self.io_jitter_us >= self.io_us {
            return bad("io_jitter_us must be smaller than io_us");
        }
        match self.kind {
            WorkloadKind::Wavefront if self.iterations == 0 || self.rows == 0 || self.cols == 0 => {
                bad("wavefront dimensions must be positive")
            }
            WorkloadKind::Pipeline if self.timesteps == 0 || self.slices == 0 => {
                bad("pipeline dimensions must be positive")
            }
            _ => Ok(()),
        }
    }

    /// Builds the task graph. Deterministic in the spec (including `seed`).
    pub fn generate(&self) -> Result<TaskGraph, WorkloadError> {
        match self.kind {
            WorkloadKind::Pipeline => gen_pipeline(self),
            WorkloadKind::Wavefront => gen_wavefront(self),
            WorkloadKind::IndependentMix => gen_independent_mix(self),
        }
    }

    /// Whether 0-based iteration `i` carries I/O.
    pub fn does_io(&self, i: usize) -> bool {
        (i + 1).is_multiple_of(self.io_frequency)
    }
}

struct Builder<'a> {
    spec: &'a WorkloadSpec,
    rng: ChaCha8Rng,
    tasks: Vec<Task>,
    edges: Vec<(TaskId, TaskId)>,
}

impl<'a> Builder<'a> {
    fn new(spec: &'a WorkloadSpec) -> Self {
        Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            tasks: Vec::new(),
            edges: Vec::new(),
        }
    }

    fn io(&mut self, kind: IoKind, base: u64) -> IoOp {
        let j = self.spec.io_jitter_us;
        let duration_us = if j == 0 || base != self.spec.io_us {
            base
        } else {
            self.rng.gen_range(base - j..=base + j)
        };
        IoOp { kind, duration_us }
    }

    fn task(&mut self, io_ops: Vec<IoOp>) -> TaskId {
        let id = TaskId(self.tasks.len() as u32);
        self.tasks.push(Task::new(
            id,
            self.spec.compute_us,
            io_ops,
            self.spec.layout,
        ));
        id
    }

    fn finish(self) -> Result<TaskGraph, WorkloadError> {
        Ok(TaskGraph::new(self.tasks, self.edges)?)
    }
}

/// `tasks` independent tasks; task `j` does one write when
/// `(j + 1) % io_frequency == 0`.
pub fn gen_independent_mix(spec: &WorkloadSpec) -> Result<TaskGraph, WorkloadError> {
    spec.validate()?;
    let mut b = Builder::new(spec);
    for j in 0..spec.tasks {
        let ops = if spec.does_io(j) {
            vec![b.io(IoKind::Write, spec.io_us)]
        } else {
            vec![]
        };
        b.task(ops);
    }
    b.finish()
}

/// `iterations` sweeps over a `rows × cols` block grid.
///
/// Within an iteration block `(r, c)` follows `(r-1, c)` and `(r, c-1)`.
/// Across iterations it follows `(r+1, c)` and `(r, c+1)` of the previous
/// iteration where those exist, and the previous iteration's last block when
/// neither does. Blocks of iterations `k` with `k % io_frequency == 0`
/// (1-based) write after computing.
pub fn gen_wavefront(spec: &WorkloadSpec) -> Result<TaskGraph, WorkloadError> {
    spec.validate()?;
    let (t, rows, cols) = (spec.iterations, spec.rows, spec.cols);
    let id = |i: usize, r: usize, c: usize| TaskId(((i * rows + r) * cols + c) as u32);
    let mut b = Builder::new(spec);
    for i in 0..t {
        for r in 0..rows {
            for c in 0..cols {
                let ops = if spec.does_io(i) {
                    vec![b.io(IoKind::Write, spec.io_us)]
                } else {
                    vec![]
                };
                let me = b.task(ops);
                if r > 0 {
                    b.edges.push((id(i, r - 1, c), me));
                }
                if c > 0 {
                    b.edges.push((id(i, r, c - 1), me));
                }
                if i > 0 {
                    let mut any = false;
                    if r + 1 < rows {
                        b.edges.push((id(i - 1, r + 1, c), me));
                        any = true;
                    }
                    if c + 1 < cols {
                        b.edges.push((id(i - 1, r, c + 1), me));
                        any = true;
                    }
                    if !any {
                        b.edges.push((id(i - 1, r, c), me));
                    }
                }
            }
        }
    }
    b.finish()
}

/// Closed-form `(tasks, edges)` of [`gen_wavefront`].
pub fn wavefront_counts(iterations: usize, rows: usize, cols: usize) -> (usize, usize) {
    let (t, r, c) = (iterations, rows, cols);
    let within = r * (c - 1) + c * (r - 1);
    let across = (r - 1) * c + r * (c - 1) + 1;
    (t * r * c, t * within + (t - 1) * across)
}

/// Per-slice chains over `timesteps`. Forward step `t` of every slice
/// writes when `(t + 1) % io_frequency == 0`. With `backward`, a mirrored
/// chain follows that reads back what was written, in reverse step order.
/// With `halo_us > 0`, each step sends to and receives from each adjacent
/// slice (one blocking op of `halo_us` each) and also waits for the
/// neighbours' previous step.
pub fn gen_pipeline(spec: &WorkloadSpec) -> Result<TaskGraph, WorkloadError> {
    spec.validate()?;
    let (steps, slices) = (spec.timesteps, spec.slices);
    let halo = spec.halo_us > 0;
    let mut b = Builder::new(spec);

    let ops_for = |b: &mut Builder<'_>, s: usize, storage: Option<IoKind>| {
        let mut ops = Vec::new();
        if let Some(kind) = storage {
            ops.push(b.io(kind, spec.io_us));
        }
        if halo {
            for _ in neighbours(s, slices) {
                ops.push(b.io(IoKind::Send, spec.halo_us));
                ops.push(b.io(IoKind::Recv, spec.halo_us));
            }
        }
        ops
    };

    let mut prev: Vec<TaskId> = Vec::new();
    for t in 0..steps {
        let mut cur = Vec::with_capacity(slices);
        for s in 0..slices {
            let storage = spec.does_io(t).then_some(IoKind::Write);
            let ops = ops_for(&mut b, s, storage);
            cur.push(b.task(ops));
        }
        link(&mut b.edges, &prev, &cur, halo);
        prev = cur;
    }
    if spec.backward {
        for t in (0..steps).rev() {
            let mut cur = Vec::with_capacity(slices);
            for s in 0..slices {
                let storage = spec.does_io(t).then_some(IoKind::Read);
                let ops = ops_for(&mut b, s, storage);
                cur.push(b.task(ops));
            }
            link(&mut b.edges, &prev, &cur, halo);
            prev = cur;
        }
    }
    b.finish()
}

fn neighbours(s: usize, slices: usize) -> impl Iterator<Item = usize> {
    let left = s.checked_sub(1);
    let right = (s + 1 < slices).then_some(s + 1);
    left.into_iter().chain(right)
}

fn link(edges: &mut Vec<(TaskId, TaskId)>, prev: &[TaskId], cur: &[TaskId], halo: bool) {
    if prev.is_empty() {
        return;
    }
    for (s, &me) in cur.iter().enumerate() {
        edges.push((prev[s], me));
        if halo {
            for n in neighbours(s, cur.len()) {
                edges.push((prev[n], me));
            }
        }
    }
}

/// Closed-form `(tasks, edges, storage_ops, halo_ops)` of [`gen_pipeline`].
pub fn pipeline_counts(spec: &WorkloadSpec) -> (usize, usize, usize, usize) {
    let (t, s) = (spec.timesteps, spec.slices);
    let phases = if spec.backward { 2 } else { 1 };
    let chain_len = t * phases;
    let tasks = chain_len * s;
    let per_link = s + if spec.halo_us > 0 { 2 * (s - 1) } else { 0 };
    let edges = (chain_len - 1) * per_link;
    let io_steps = t / spec.io_frequency;
    let storage = io_steps * s * phases;
    let halo_ops = if spec.halo_us > 0 {
        4 * (s - 1) * chain_len
    } else {
        0
    };
    (tasks, edges, storage, halo_ops)
}
