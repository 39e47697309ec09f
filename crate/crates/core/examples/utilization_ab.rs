//! Baseline vs UMT on a checkpointing wavefront, 8 simulated cores: half the
//! work is blocking writes, so the baseline idles half the time.

use std::sync::Arc;

use umt::cli::{compare_rows, write_comparison, MetricsRow, Mode};
use umt::runtime::{run_sim, RuntimeConfig};
use umt::sim::SimConfig;
use umt::workloads::WorkloadSpec;

fn main() {
    let spec = WorkloadSpec::from_toml_str(include_str!("../configs/heat.toml")).unwrap();
    let graph = Arc::new(spec.generate().unwrap());
    println!(
        "{}: {} tasks, {} edges",
        spec.id,
        graph.len(),
        graph.edges().len()
    );

    let mut rows = Vec::new();
    for umt in [false, true] {
        let rt = RuntimeConfig {
            seed: spec.seed,
            ..RuntimeConfig::umt(umt)
        };
        let sim = SimConfig {
            rng_seed: spec.seed,
            ..SimConfig::with_cores(8)
        };
        let r = run_sim(Arc::clone(&graph), &rt, sim).unwrap();
        println!(
            "umt={umt:<5} makespan {:>9}us  utilization {:.3}  workers {:>2}  surrenders {}",
            r.metrics.makespan_us, r.metrics.utilization, r.metrics.workers, r.metrics.surrenders
        );
        rows.push(MetricsRow::new(
            &spec.id,
            Mode::Sim,
            umt,
            spec.seed,
            8,
            &r.metrics,
        ));
    }
    let cmp = compare_rows(&rows[..1], &rows[1..]).unwrap();
    println!("speedup {:.1}%\n", cmp[0].speedup * 100.0);
    write_comparison(std::io::stdout(), &cmp).unwrap();
}
