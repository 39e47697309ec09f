use std::sync::Arc;

use proptest::prelude::*;

use umt::event_channel::{pack, unpack, ChannelSet, EventChannel, OverflowMode};
use umt::monitor::{EventKind, SchedState, ThreadId, ThreadRecord};
use umt::runtime::{run_sim, Layout, RuntimeConfig};
use umt::sim::{Action, MigrationPolicy, Script, Sim, SimConfig};
use umt::trace;
use umt::workloads::{pipeline_counts, wavefront_counts, WorkloadSpec};

#[derive(Debug, Clone, Copy)]
enum Op {
    Block,
    Unblock,
    Drain,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![Just(Op::Block), Just(Op::Unblock), Just(Op::Drain)]
}

fn layout() -> impl Strategy<Value = Layout> {
    prop_oneof![
        Just(Layout::IoFirst),
        Just(Layout::ComputeFirst),
        Just(Layout::ComputeYieldIo),
        Just(Layout::IoYieldCompute),
    ]
}

fn spec() -> impl Strategy<Value = WorkloadSpec> {
    let mix = (1usize..40, layout()).prop_map(|(n, l)| WorkloadSpec::independent_mix(n, 1, 1, l));
    let wave = (1usize..5, 1usize..5, 1usize..5, 1usize..4)
        .prop_map(|(t, r, c, f)| WorkloadSpec::wavefront(t, r, c, 1, 1, f));
    let pipe = (
        1usize..5,
        1usize..5,
        1usize..4,
        any::<bool>(),
        prop_oneof![Just(0u64), 10u64..100],
    )
        .prop_map(|(t, s, f, back, halo)| {
            let mut p = WorkloadSpec::pipeline(t, s, 1, 1, f);
            p.backward = back;
            p.halo_us = halo;
            p
        });
    (
        prop_oneof![mix, wave, pipe],
        20u64..1500,
        20u64..3000,
        layout(),
        any::<u64>(),
        0u64..100,
    )
        .prop_map(|(mut s, c, io, l, seed, jit_pct)| {
            s.compute_us = c;
            s.io_us = io;
            s.layout = l;
            s.seed = seed;
            s.io_jitter_us = io * jit_pct / 100 / 2;
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn drained_sums_equal_recorded(ops in prop::collection::vec(op(), 0..400)) {
        let ch = EventChannel::new(OverflowMode::Strict);
        let (mut rb, mut ru, mut db, mut du) = (0u64, 0u64, 0u64, 0u64);
        for o in ops {
            match o {
                Op::Block => { ch.record_block().unwrap(); rb += 1; }
                Op::Unblock => { ch.record_unblock().unwrap(); ru += 1; }
                Op::Drain => {
                    let before = ch.peek();
                    match ch.try_drain() {
                        Ok(b) => {
                            prop_assert_eq!(b, before);
                            db += u64::from(b.blocked);
                            du += u64::from(b.unblocked);
                            prop_assert!(ch.peek().is_empty());
                        }
                        Err(_) => prop_assert!(before.is_empty()),
                    }
                }
            }
        }
        let rest = ch.peek();
        prop_assert_eq!(db + u64::from(rest.blocked), rb);
        prop_assert_eq!(du + u64::from(rest.unblocked), ru);
    }

    #[test]
    fn pack_unpack_round_trip(b: u32, u: u32) {
        let p = pack(u64::from(b), u64::from(u)).unwrap();
        let back = unpack(p);
        prop_assert_eq!((back.blocked, back.unblocked), (b, u));
        prop_assert_eq!(pack(u64::from(back.blocked), u64::from(back.unblocked)).unwrap(), p);
    }

    #[test]
    fn additive_mode_matches_strict_below_overflow(ops in prop::collection::vec(op(), 0..200)) {
        let a = EventChannel::new(OverflowMode::Strict);
        let b = EventChannel::new(OverflowMode::PaperFaithful);
        for o in ops {
            match o {
                Op::Block => { a.record_block().unwrap(); b.record_block().unwrap(); }
                Op::Unblock => { a.record_unblock().unwrap(); b.record_unblock().unwrap(); }
                Op::Drain => prop_assert_eq!(a.try_drain().ok(), b.try_drain().ok()),
            }
        }
    }

    /// Net writes per core from one thread's hooks equal its presence there.
    #[test]
    fn hook_writes_track_thread_position(
        steps in prop::collection::vec((0usize..3, 0u8..3), 1..100),
    ) {
        let set = ChannelSet::new(3, OverflowMode::Strict);
        let mut rec = ThreadRecord::new(ThreadId(1), 0, SchedState::Running);
        rec.monitored = true;
        let mut net = [1i64, 0, 0];
        let mut on_core: Option<usize> = Some(0);
        for (core, kind) in steps {
            if rec.sched_state == SchedState::Running {
                let next = if kind == 0 { SchedState::Blocked } else { SchedState::Ready };
                for e in rec.switch_out(set.channels(), next).unwrap() {
                    net[e.core] += if e.kind == EventKind::Block { -1 } else { 1 };
                }
                if next == SchedState::Blocked { on_core = None; }
            } else {
                let woken = rec.sched_state == SchedState::Blocked;
                for e in rec.switch_in(set.channels(), woken, core).unwrap() {
                    net[e.core] += if e.kind == EventKind::Block { -1 } else { 1 };
                }
                on_core = Some(core);
            }
            let mut truth = [0i64; 3];
            if let Some(c) = on_core {
                // a preempted thread still counts where it last ran
                truth[if rec.sched_state == SchedState::Ready { rec.last_core } else { c }] = 1;
            }
            prop_assert_eq!(net, truth);
        }
    }

    #[test]
    fn generated_graphs_are_acyclic_with_closed_form_counts(s in spec()) {
        let g = s.generate().unwrap();
        prop_assert_eq!(g.topological_order().unwrap().len(), g.len());
        match s.kind {
            umt::workloads::WorkloadKind::Wavefront => {
                prop_assert_eq!((g.len(), g.edges().len()), wavefront_counts(s.iterations, s.rows, s.cols));
            }
            umt::workloads::WorkloadKind::Pipeline => {
                let (tasks, edges, storage, halo) = pipeline_counts(&s);
                prop_assert_eq!(g.len(), tasks);
                prop_assert_eq!(g.edges().len(), edges);
                prop_assert_eq!(g.io_op_count(), storage + halo);
            }
            umt::workloads::WorkloadKind::IndependentMix => {
                prop_assert_eq!(g.len(), s.tasks);
                prop_assert!(g.edges().is_empty());
            }
        }
        for &(a, b) in g.edges() {
            prop_assert!(a != b);
        }
    }

    #[test]
    fn toml_round_trip(s in spec()) {
        match s.to_toml_string() {
            Ok(text) => prop_assert_eq!(WorkloadSpec::from_toml_str(&text).unwrap(), s),
            Err(_) => prop_assert!(s.seed > i64::MAX as u64),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn runtime_runs_every_task_once_with_exact_ledgers(
        s in spec(),
        cores in 1usize..6,
        umt_on: bool,
        stale in prop_oneof![Just(0.0), 0.0f64..1.0],
        migrate in prop_oneof![Just(0.0), 0.0f64..0.5],
        seed: u64,
    ) {
        let g = Arc::new(s.generate().unwrap());
        let rt = RuntimeConfig { seed, stale_fold_probability: stale, ..RuntimeConfig::umt(umt_on) };
        let sim = SimConfig {
            rng_seed: seed,
            trace: true,
            migration: if migrate > 0.0 { MigrationPolicy::RandomOnWake(migrate) } else { MigrationPolicy::None },
            ..SimConfig::with_cores(cores)
        };
        let r = run_sim(g, &rt, sim).unwrap();
        prop_assert!(r.all_tasks_once());
        prop_assert!(r.ledgers_exact(), "{:?} vs {:?}", r.final_ledgers, r.ground_truth);
        prop_assert!(r.audit.as_ref().unwrap().is_clean(), "{:?}", r.audit);
        prop_assert_eq!(r.metrics.events_blocked, r.metrics.events_unblocked);
        for v in r.metrics.per_core_utilization.iter().chain(&r.metrics.per_core_oversubscription) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        if !umt_on && migrate == 0.0 {
            prop_assert!(r.metrics.per_core_oversubscription.iter().all(|&v| v == 0.0));
            prop_assert_eq!(r.metrics.workers, cores);
        }
        let text = trace::to_jsonl(&r.trace);
        prop_assert_eq!(trace::read_jsonl(text.as_bytes()).unwrap(), r.trace);
    }

    #[test]
    fn scripted_threads_keep_derived_counts_exact(
        scripts in prop::collection::vec(
            (0usize..3, any::<bool>(), prop::collection::vec((1u64..3000, 0u64..2000), 1..5)),
            1..8,
        ),
        p in 0.0f64..1.0,
        seed: u64,
    ) {
        let mut s = Sim::new(SimConfig {
            rng_seed: seed,
            migration: MigrationPolicy::RandomOnWake(p),
            ..SimConfig::with_cores(3)
        }).unwrap();
        for (core, monitored, steps) in scripts {
            let actions = steps.into_iter().flat_map(|(c, b)| {
                let mut v = vec![Action::Compute(c)];
                if b > 0 { v.push(Action::Block(b)); }
                v
            });
            let t = s.spawn_thread(core, Script::new(actions)).unwrap();
            s.register_thread(t, monitored).unwrap();
        }
        s.run().unwrap();
        prop_assert!(s.audit().is_clean(), "{:?}", s.audit());
        prop_assert_eq!(s.event_derived_ready(), vec![0, 0, 0]);
        let c = s.clock();
        for core in 0..3 {
            prop_assert_eq!(c.busy[core] + c.oversubscribed[core] + c.idle[core], c.now);
        }
    }
}
