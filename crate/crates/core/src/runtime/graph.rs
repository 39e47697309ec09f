//! Task graphs and the ready-task queue.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl TaskId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoKind {
    Read,
    Write,
    Send,
    Recv,
}

/// A blocking operation performed by a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoOp {
    pub kind: IoKind,
    pub duration_us: u64,
}

/// Order of compute and blocking phases inside a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// I/O, then compute. Workers woken while this task was blocked end up
    /// competing with it for the core until it finishes.
    IoFirst,
    #[default]
    ComputeFirst,
    /// Compute, a scheduling point, then I/O.
    ComputeYieldIo,
    /// I/O, a scheduling point, then compute.
    IoYieldCompute,
}

impl std::str::FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "io-first" => Ok(Layout::IoFirst),
            "compute-first" => Ok(Layout::ComputeFirst),
            "compute-yield-io" => Ok(Layout::ComputeYieldIo),
            "io-yield-compute" => Ok(Layout::IoYieldCompute),
            other => Err(format!("unknown layout {other:?}")),
        }
    }
}

/// One step of a task body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Compute(u64),
    Io(IoOp),
    /// Task scheduling point (taskyield).
    Yield,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub compute_us: u64,
    pub io_ops: Vec<IoOp>,
    pub layout: Layout,
}

impl Task {
    pub fn new(id: TaskId, compute_us: u64, io_ops: Vec<IoOp>, layout: Layout) -> Self {
        Self {
            id,
            compute_us,
            io_ops,
            layout,
        }
    }

    pub fn io_us(&self) -> u64 {
        self.io_ops.iter().map(|op| op.duration_us).sum()
    }

    pub fn phases(&self) -> Vec<Phase> {
        let compute = Phase::Compute(self.compute_us);
        let io = self.io_ops.iter().map(|&op| Phase::Io(op));
        if self.io_ops.is_empty() {
            return vec![compute];
        }
        let mut out = Vec::with_capacity(self.io_ops.len() + 2);
        match self.layout {
            Layout::IoFirst => {
                out.extend(io);
                out.push(compute);
            }
            Layout::ComputeFirst => {
                out.push(compute);
                out.extend(io);
            }
            Layout::ComputeYieldIo => {
                out.push(compute);
                out.push(Phase::Yield);
                out.extend(io);
            }
            Layout::IoYieldCompute => {
                out.extend(io);
                out.push(Phase::Yield);
                out.push(compute);
            }
        }
        out
    }

    /// `phases()[index]` without allocating.
    pub fn phase(&self, index: usize) -> Option<Phase> {
        let n_io = self.io_ops.len();
        if n_io == 0 {
            return (index == 0).then_some(Phase::Compute(self.compute_us));
        }
        let compute = Phase::Compute(self.compute_us);
        let io = |i: usize| self.io_ops.get(i).map(|&op| Phase::Io(op));
        match self.layout {
            Layout::IoFirst if index < n_io => io(index),
            Layout::IoFirst => (index == n_io).then_some(compute),
            Layout::ComputeFirst if index == 0 => Some(compute),
            Layout::ComputeFirst => io(index - 1),
            Layout::ComputeYieldIo => match index {
                0 => Some(compute),
                1 => Some(Phase::Yield),
                i => io(i - 2),
            },
            Layout::IoYieldCompute if index < n_io => io(index),
            Layout::IoYieldCompute if index == n_io => Some(Phase::Yield),
            Layout::IoYieldCompute => (index == n_io + 1).then_some(compute),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("task at position {position} has id {id:?}; ids must be dense and in order")]
    BadTaskId { position: usize, id: TaskId },
    #[error("edge ({0:?}, {1:?}) references an unknown task")]
    UnknownTask(TaskId, TaskId),
    #[error("self edge on {0:?}")]
    SelfEdge(TaskId),
    #[error("dependency cycle through {0:?}")]
    Cycle(TaskId),
}

/// Immutable set of tasks plus dependency edges `(pred, succ)`.
#[derive(Debug, Clone, Default)]
pub struct TaskGraph {
    tasks: Vec<Task>,
    edges: Vec<(TaskId, TaskId)>,
    successors: Vec<Vec<TaskId>>,
    pred_counts: Vec<u32>,
}

impl TaskGraph {
    pub fn new(tasks: Vec<Task>, edges: Vec<(TaskId, TaskId)>) -> Result<Self, GraphError> {
        for (position, t) in tasks.iter().enumerate() {
            if t.id.index() != position {
                return Err(GraphError::BadTaskId { position, id: t.id });
            }
        }
        let n = tasks.len();
        let mut successors = vec![Vec::new(); n];
        let mut pred_counts = vec![0u32; n];
        for &(a, b) in &edges {
            if a.index() >= n || b.index() >= n {
                return Err(GraphError::UnknownTask(a, b));
            }
            if a == b {
                return Err(GraphError::SelfEdge(a));
            }
            successors[a.index()].push(b);
            pred_counts[b.index()] += 1;
        }
        let graph = Self {
            tasks,
            edges,
            successors,
            pred_counts,
        };
        graph.topological_order()?;
        Ok(graph)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, id: TaskId) -> &Task {
        &self.tasks[id.index()]
    }

    pub fn edges(&self) -> &[(TaskId, TaskId)] {
        &self.edges
    }

    pub fn successors(&self, id: TaskId) -> &[TaskId] {
        &self.successors[id.index()]
    }

    pub fn pred_count(&self, id: TaskId) -> u32 {
        self.pred_counts[id.index()]
    }

    pub fn total_compute_us(&self) -> u64 {
        self.tasks.iter().map(|t| t.compute_us).sum()
    }

    pub fn total_io_us(&self) -> u64 {
        self.tasks.iter().map(Task::io_us).sum()
    }

    pub fn io_op_count(&self) -> usize {
        self.tasks.iter().map(|t| t.io_ops.len()).sum()
    }

    /// Kahn order, smallest id first among ready tasks.
    pub fn topological_order(&self) -> Result<Vec<TaskId>, GraphError> {
        let mut remaining = self.pred_counts.clone();
        let mut ready: std::collections::BTreeSet<TaskId> = remaining
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| TaskId(i as u32))
            .collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(t) = ready.pop_first() {
            order.push(t);
            for &s in &self.successors[t.index()] {
                remaining[s.index()] -= 1;
                if remaining[s.index()] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != self.len() {
            let stuck = remaining.iter().position(|&c| c > 0).unwrap_or(0);
            return Err(GraphError::Cycle(TaskId(stuck as u32)));
        }
        Ok(order)
    }
}

/// A task together with the index of the next phase to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskCursor {
    pub task: TaskId,
    pub phase: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DispatchError {
    #[error("task {0:?} completed twice")]
    DoubleCompletion(TaskId),
    #[error("task {0:?} completed before all predecessors")]
    PrematureCompletion(TaskId),
}

/// Mutable dispatch state over a [`TaskGraph`]: FIFO of dispatchable tasks
/// and per-task remaining predecessor counts.
#[derive(Debug, Clone)]
pub struct DispatchQueue {
    ready: VecDeque<TaskCursor>,
    remaining_preds: Vec<u32>,
    starts: Vec<u32>,
    completions: Vec<u32>,
    completed: usize,
}

impl DispatchQueue {
    pub fn new(graph: &TaskGraph) -> Self {
        let remaining_preds: Vec<u32> = graph
            .tasks()
            .iter()
            .map(|t| graph.pred_count(t.id))
            .collect();
        let ready = remaining_preds
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| TaskCursor {
                task: TaskId(i as u32),
                phase: 0,
            })
            .collect();
        Self {
            ready,
            remaining_preds,
            starts: vec![0; graph.len()],
            completions: vec![0; graph.len()],
            completed: 0,
        }
    }

    pub fn dispatchable(&self) -> usize {
        self.ready.len()
    }

    pub fn pop(&mut self) -> Option<TaskCursor> {
        let cur = self.ready.pop_front()?;
        if cur.phase == 0 {
            self.starts[cur.task.index()] += 1;
        }
        Some(cur)
    }

    /// Returns a partially executed task to the head of the queue.
    pub fn requeue_front(&mut self, cursor: TaskCursor) {
        self.ready.push_front(cursor);
    }

    /// Marks `task` done and enqueues successors that became dispatchable.
    /// Returns how many were released.
    pub fn complete(&mut self, graph: &TaskGraph, task: TaskId) -> Result<usize, DispatchError> {
        if self.remaining_preds[task.index()] != 0 {
            return Err(DispatchError::PrematureCompletion(task));
        }
        let done = &mut self.completions[task.index()];
        if *done > 0 {
            return Err(DispatchError::DoubleCompletion(task));
        }
        *done += 1;
        self.completed += 1;
        let mut released = 0;
        for &s in graph.successors(task) {
            let r = &mut self.remaining_preds[s.index()];
            *r -= 1;
            if *r == 0 {
                self.ready.push_back(TaskCursor { task: s, phase: 0 });
                released += 1;
            }
        }
        Ok(released)
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn is_finished(&self) -> bool {
        self.completed == self.completions.len()
    }

    /// How many times each task body was started.
    pub fn starts(&self) -> &[u32] {
        &self.starts
    }

    pub fn completions(&self) -> &[u32] {
        &self.completions
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(id: u32) -> Task {
        Task::new(TaskId(id), 10, vec![], Layout::ComputeFirst)
    }

    #[test]
    fn phases_follow_layout() {
        let io = IoOp {
            kind: IoKind::Write,
            duration_us: 5,
        };
        let mk = |layout| Task::new(TaskId(0), 7, vec![io], layout).phases();
        assert_eq!(mk(Layout::IoFirst), vec![Phase::Io(io), Phase::Compute(7)]);
        assert_eq!(
            mk(Layout::ComputeFirst),
            vec![Phase::Compute(7), Phase::Io(io)]
        );
        assert_eq!(
            mk(Layout::ComputeYieldIo),
            vec![Phase::Compute(7), Phase::Yield, Phase::Io(io)]
        );
        assert_eq!(
            mk(Layout::IoYieldCompute),
            vec![Phase::Io(io), Phase::Yield, Phase::Compute(7)]
        );
        for layout in [
            Layout::IoFirst,
            Layout::ComputeFirst,
            Layout::ComputeYieldIo,
            Layout::IoYieldCompute,
        ] {
            let t = Task::new(TaskId(0), 7, vec![io, io], layout);
            let by_index: Vec<_> = (0..).map_while(|i| t.phase(i)).collect();
            assert_eq!(by_index, t.phases());
        }
        // no I/O, no scheduling point
        assert_eq!(
            Task::new(TaskId(0), 7, vec![], Layout::ComputeYieldIo).phases(),
            vec![Phase::Compute(7)]
        );
    }

    #[test]
    fn rejects_cycles_and_bad_edges() {
        let tasks = vec![t(0), t(1), t(2)];
        let cyc = vec![
            (TaskId(0), TaskId(1)),
            (TaskId(1), TaskId(2)),
            (TaskId(2), TaskId(0)),
        ];
        assert!(matches!(
            TaskGraph::new(tasks.clone(), cyc),
            Err(GraphError::Cycle(_))
        ));
        assert_eq!(
            TaskGraph::new(tasks.clone(), vec![(TaskId(0), TaskId(0))]).unwrap_err(),
            GraphError::SelfEdge(TaskId(0))
        );
        assert!(matches!(
            TaskGraph::new(tasks, vec![(TaskId(0), TaskId(9))]),
            Err(GraphError::UnknownTask(..))
        ));
        assert!(matches!(
            TaskGraph::new(vec![t(1)], vec![]),
            Err(GraphError::BadTaskId { .. })
        ));
    }

    #[test]
    fn dispatch_releases_successors_in_order() {
        let g = TaskGraph::new(
            vec![t(0), t(1), t(2), t(3)],
            vec![
                (TaskId(0), TaskId(2)),
                (TaskId(1), TaskId(2)),
                (TaskId(2), TaskId(3)),
            ],
        )
        .unwrap();
        let mut q = DispatchQueue::new(&g);
        assert_eq!(q.dispatchable(), 2);
        let a = q.pop().unwrap();
        let b = q.pop().unwrap();
        assert_eq!((a.task, b.task), (TaskId(0), TaskId(1)));
        assert_eq!(q.complete(&g, a.task), Ok(0));
        assert_eq!(
            q.complete(&g, TaskId(3)),
            Err(DispatchError::PrematureCompletion(TaskId(3)))
        );
        assert_eq!(q.complete(&g, b.task), Ok(1));
        assert_eq!(
            q.complete(&g, b.task),
            Err(DispatchError::DoubleCompletion(TaskId(1)))
        );
        let c = q.pop().unwrap();
        assert_eq!(c.task, TaskId(2));
        q.complete(&g, c.task).unwrap();
        let d = q.pop().unwrap();
        q.complete(&g, d.task).unwrap();
        assert!(q.is_finished());
        assert_eq!(q.starts(), &[1, 1, 1, 1]);
    }

    #[test]
    fn requeued_continuation_is_not_a_new_start() {
        let g = TaskGraph::new(vec![t(0)], vec![]).unwrap();
        let mut q = DispatchQueue::new(&g);
        let mut c = q.pop().unwrap();
        c.phase = 2;
        q.requeue_front(c);
        assert_eq!(q.pop(), Some(c));
        assert_eq!(q.starts(), &[1]);
    }
}
