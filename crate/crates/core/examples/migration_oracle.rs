//! Threads preempted on one core and resumed on another: the monitor writes
//! the missed block on the previous core so per-core counts stay exact. The
//! simulator audits the event-derived counts against its own run queues.

use umt::sim::{Action, MigrationPolicy, Script, Sim, SimConfig};

fn main() {
    let mut sim = Sim::new(SimConfig {
        rng_seed: 11,
        migration: MigrationPolicy::RandomOnWake(0.3),
        ..SimConfig::with_cores(4)
    })
    .unwrap();
    for i in 0..12u64 {
        let script = Script::new([
            Action::Compute(2500 + 100 * i),
            Action::Block(300),
            Action::Compute(1800),
            Action::Block(50 * i + 10),
            Action::Compute(900),
        ]);
        let tid = sim.spawn_thread((i % 4) as usize, script).unwrap();
        sim.register_thread(tid, true).unwrap();
    }
    sim.run().unwrap();
    let st = sim.stats();
    let audit = sim.audit();
    println!(
        "{} migrations, {} preemptions, {} compensating block/unblock pairs",
        st.migrations, st.preemptions, st.compensations
    );
    println!(
        "{} audited events, {} quiescent points, violations: {} / {}",
        audit.checks,
        audit.quiescent_checks,
        audit.accounting_violations,
        audit.quiescent_violations
    );
    println!("final event-derived counts {:?}", sim.event_derived_ready());
}
