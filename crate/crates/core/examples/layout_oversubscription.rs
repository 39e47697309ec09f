//! How a task's phase order affects oversubscription. A worker returning
//! from I/O only gets a scheduling point when its task ends, so I/O placed
//! before compute leaves two workers sharing the core for that compute.

use std::sync::Arc;

use umt::runtime::{run_sim, Layout, RuntimeConfig};
use umt::sim::SimConfig;
use umt::workloads::WorkloadSpec;

fn main() {
    println!(
        "{:<18} {:>8} {:>12} {:>10} {:>8}",
        "layout", "util", "oversub max", "surrender", "workers"
    );
    for layout in [
        Layout::IoFirst,
        Layout::ComputeFirst,
        Layout::ComputeYieldIo,
        Layout::IoYieldCompute,
    ] {
        let graph = Arc::new(
            WorkloadSpec::independent_mix(400, 200, 200, layout)
                .generate()
                .unwrap(),
        );
        let r = run_sim(graph, &RuntimeConfig::umt(true), SimConfig::with_cores(4)).unwrap();
        let m = &r.metrics;
        println!(
            "{:<18} {:>8.3} {:>12.4} {:>10} {:>8}",
            format!("{layout:?}"),
            m.utilization,
            m.max_core_oversubscription,
            m.surrenders,
            m.workers
        );
    }
}
