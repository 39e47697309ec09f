//! A five-step scenario on four cores: a worker blocks on I/O,
//! the leader refills its core from the idle pool, the blocked worker comes
//! back, the core is briefly oversubscribed and one worker surrenders.

use std::sync::Arc;

use umt::runtime::{run_sim, IoKind, IoOp, Layout, RuntimeConfig, Task, TaskGraph, TaskId};
use umt::sim::SimConfig;
use umt::trace::TraceKind;

fn main() {
    let io = |us| {
        vec![IoOp {
            kind: IoKind::Write,
            duration_us: us,
        }]
    };
    let mut tasks = vec![Task::new(TaskId(0), 100, io(1000), Layout::ComputeFirst)];
    for i in 1..4 {
        tasks.push(Task::new(TaskId(i), 3000, vec![], Layout::ComputeFirst));
    }
    for i in 4..10 {
        tasks.push(Task::new(TaskId(i), 300, vec![], Layout::ComputeFirst));
    }
    let graph = Arc::new(TaskGraph::new(tasks, vec![]).unwrap());
    let sim = SimConfig {
        trace: true,
        ..SimConfig::with_cores(4)
    };
    let report = run_sim(graph, &RuntimeConfig::umt(true), sim).unwrap();

    println!("core 0 timeline:");
    for r in report.trace.iter().filter(|r| r.core == 0) {
        let note = match r.kind {
            TraceKind::Block if r.extra.umt == Some(true) => "block event written",
            TraceKind::Unblock => "unblock event written",
            TraceKind::Wake => "runnable",
            TraceKind::Dispatch => "on cpu",
            TraceKind::Surrender => "oversubscribed: surrenders to the idle pool",
            _ => "",
        };
        println!(
            "  t={:>5}us  W{}  {:<9} {note}",
            r.t,
            r.tid,
            format!("{:?}", r.kind).to_lowercase()
        );
    }
    let m = &report.metrics;
    println!(
        "makespan {}us, utilization {:.3}, core 0 oversubscribed {:.2}% of the run, {} workers",
        m.makespan_us,
        m.utilization,
        m.per_core_oversubscription[0] * 100.0,
        m.workers
    );
}
