//! Real threads: 4 workers, 32 tasks of 5ms spin + 5ms sleep. Pinning is
//! skipped with a warning when fewer than 4 cores are available.
//!
//! `RUST_LOG=info cargo run --release --example live_smoke`

use std::sync::Arc;

use umt::runtime::{run_live, Layout, LiveConfig, RuntimeConfig};
use umt::workloads::WorkloadSpec;

fn main() {
    env_logger::init();
    let graph = Arc::new(
        WorkloadSpec::independent_mix(32, 5000, 5000, Layout::ComputeFirst)
            .generate()
            .unwrap(),
    );
    let mut makespans = Vec::new();
    for umt in [false, true] {
        let r = run_live(
            Arc::clone(&graph),
            &LiveConfig::new(4, RuntimeConfig::umt(umt)),
        )
        .unwrap();
        println!(
            "umt={umt:<5} wall {:>6}us  oversub max {:.3}  workers {}  events {}/{}",
            r.metrics.makespan_us,
            r.metrics.max_core_oversubscription,
            r.metrics.workers,
            r.metrics.events_blocked,
            r.metrics.events_unblocked
        );
        makespans.push(r.metrics.makespan_us as f64);
    }
    println!("speedup {:.2}x", makespans[0] / makespans[1]);
}
