//! Writes a JSON-lines trace of a run, reads it back and rebuilds per-core
//! oversubscription periods and event counts from it.

use std::sync::Arc;

use umt::cli::{trace_stats, write_trace_stats};
use umt::runtime::{run_sim, Layout, RuntimeConfig};
use umt::sim::SimConfig;
use umt::trace;
use umt::workloads::WorkloadSpec;

fn main() {
    let graph = Arc::new(
        WorkloadSpec::independent_mix(60, 300, 300, Layout::IoFirst)
            .generate()
            .unwrap(),
    );
    let sim = SimConfig {
        trace: true,
        ..SimConfig::with_cores(2)
    };
    let report = run_sim(graph, &RuntimeConfig::umt(true), sim).unwrap();
    let text = trace::to_jsonl(&report.trace);
    println!("{} trace lines; first three:", report.trace.len());
    for line in text.lines().take(3) {
        println!("  {line}");
    }
    let records = trace::read_jsonl(text.as_bytes()).unwrap();
    let stats = trace_stats(&records);
    write_trace_stats(std::io::stdout(), &stats).unwrap();
    println!(
        "metrics agree: events {}/{} vs {}/{}, oversubscription {:?} vs {:?}",
        stats.events_blocked,
        stats.events_unblocked,
        report.metrics.events_blocked,
        report.metrics.events_unblocked,
        stats
            .per_core
            .iter()
            .map(|c| c.oversubscription)
            .collect::<Vec<_>>(),
        report.metrics.per_core_oversubscription
    );
}
