//! A slice pipeline with a forward pass that stores wavefields, a backward
//! pass that reads them back, and halo exchanges between adjacent slices.

use std::sync::Arc;

use umt::metrics::speedup;
use umt::runtime::{run_sim, RuntimeConfig};
use umt::sim::SimConfig;
use umt::workloads::{pipeline_counts, WorkloadSpec};

fn main() {
    let spec = WorkloadSpec::from_toml_str(include_str!("../configs/fwi.toml")).unwrap();
    let (tasks, edges, storage, halo) = pipeline_counts(&spec);
    println!(
        "{}: {tasks} tasks, {edges} edges, {storage} storage ops, {halo} halo ops",
        spec.id
    );
    let graph = Arc::new(spec.generate().unwrap());
    let mut base = 0;
    for umt in [false, true] {
        let r = run_sim(
            Arc::clone(&graph),
            &RuntimeConfig::umt(umt),
            SimConfig::with_cores(8),
        )
        .unwrap();
        let m = &r.metrics;
        println!(
            "umt={umt:<5} makespan {:>8}us  utilization {:.3}  oversub {:.4}",
            m.makespan_us, m.utilization, m.oversubscription
        );
        if umt {
            println!(
                "speedup {:.1}%",
                speedup(base as f64, m.makespan_us as f64) * 100.0
            );
        } else {
            base = m.makespan_us;
        }
    }
}
