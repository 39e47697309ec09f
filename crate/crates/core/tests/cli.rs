use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use tempfile::TempDir;

use umt::cli::{self, read_rows, Mode, RunArgs};
use umt::runtime::{run_sim, RuntimeConfig};
use umt::sim::SimConfig;
use umt::workloads::WorkloadSpec;

const MIX: &str = r#"
id = "mix50"
kind = "independent-mix"
tasks = 64
compute_us = 500
io_us = 500
layout = "compute-first"
seed = 3
"#;

fn umt_bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_umt"));
    c.env_remove(cli::SEED_ENV);
    c
}

fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    umt_bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_off_then_on_then_compare() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "mix.toml", MIX);
    let base = dir.path().join("base.csv");
    let umt = dir.path().join("umt.csv");
    let out = run(&["run", "sim", s(&cfg), "--umt", "off", "--out", s(&base)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = run(&["run", "sim", s(&cfg), "--umt", "on", "--out", s(&umt)]);
    assert!(out.status.success());

    let b = read_rows(fs::File::open(&base).unwrap()).unwrap();
    let u = read_rows(fs::File::open(&umt).unwrap()).unwrap();
    assert!(
        (b[0].utilization - 0.5).abs() < 0.05,
        "{}",
        b[0].utilization
    );
    assert!(u[0].utilization >= 0.9, "{}", u[0].utilization);
    assert_eq!(b[0].tasks, u[0].tasks);
    assert_eq!(b[0].seed, 3);

    let out = run(&["compare", s(&base), s(&umt)]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("workload,seed,cores,variant,metric,value\n"));
    assert!(csv.contains("mix50,3,4,comparison,speedup_pct,"));

    let same = run(&["compare", s(&base), s(&base)]);
    let csv = String::from_utf8(same.stdout).unwrap();
    assert!(csv.contains("comparison,speedup_pct,0.0\n"), "{csv}");
}

#[test]
fn missing_config_exits_2() {
    let out = run(&["run", "sim", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn parse_error_reports_line() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "bad.toml",
        "kind = \"wavefront\"\ncompute_us = 1\nio_us = 1\nrows = \"x\"\n",
    );
    let out = run(&["run", "sim", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn mismatched_compare_exits_2() {
    let dir = TempDir::new().unwrap();
    let a = write(&dir, "a.toml", MIX);
    let b = write(&dir, "b.toml", &MIX.replace("mix50", "other"));
    let (ca, cb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert!(run(&["run", "sim", s(&a), "--umt", "off", "--out", s(&ca)])
        .status
        .success());
    assert!(run(&["run", "sim", s(&b), "--out", s(&cb)])
        .status
        .success());
    let out = run(&["compare", s(&ca), s(&cb)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatched runs"));
}

#[test]
fn seed_env_overrides_workload_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "mix.toml", MIX);
    let out = umt_bin()
        .env(cli::SEED_ENV, "41")
        .args(["run", "sim", s(&cfg)])
        .output()
        .unwrap();
    assert!(out.status.success());
    let rows = read_rows(&out.stdout[..]).unwrap();
    assert_eq!(rows[0].seed, 41);
    let out = umt_bin()
        .env(cli::SEED_ENV, "41")
        .args(["run", "sim", s(&cfg), "--seed", "5"])
        .output()
        .unwrap();
    assert_eq!(read_rows(&out.stdout[..]).unwrap()[0].seed, 5);
}

#[test]
fn stalled_run_exit_code_is_3() {
    let e = cli::CliError::Runtime(umt::runtime::RuntimeError::Stalled {
        completed: 1,
        total: 2,
        at_us: 10,
    });
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn trace_stats_totals_match_run_metrics() {
    let dir = TempDir::new().unwrap();
    let body = r#"
id = "wf"
kind = "wavefront"
iterations = 6
rows = 6
cols = 6
compute_us = 300
io_us = 900
io_frequency = 2
layout = "io-first"
io_jitter_us = 200
"#;
    let cfg = write(&dir, "wf.toml", body);
    let tr = dir.path().join("t.jsonl");
    let args = RunArgs {
        mode: Mode::Sim,
        config: cfg.clone(),
        umt: true,
        seed: Some(2),
        cores: 3,
        trace: Some(tr.clone()),
        out: Some(dir.path().join("m.csv")),
    };
    let outcome = cli::cmd_run(&args, std::io::sink()).unwrap();
    let stats = cli::cmd_trace_stats(&tr, std::io::sink()).unwrap();
    let m = &outcome.report.metrics;
    assert_eq!(stats.events_blocked, m.events_blocked);
    assert_eq!(stats.events_unblocked, m.events_unblocked);
    assert_eq!(stats.end_us, m.makespan_us);
    assert_eq!(stats.total.dispatches, m.context_switches);
    assert_eq!(stats.total.surrenders, m.surrenders);
    for (c, core) in stats.per_core.iter().enumerate() {
        assert_eq!(
            core.oversubscription, m.per_core_oversubscription[c],
            "core {c}"
        );
    }
    assert!(
        stats.total.oversubscribed_us > 0,
        "io-first should oversubscribe"
    );

    // the binary reports the same thing
    let out = run(&["trace-stats", s(&tr)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().last().unwrap().starts_with("total,"));
}

#[test]
fn trace_stats_malformed_line_exits_2() {
    let dir = TempDir::new().unwrap();
    let tr = write(
        &dir,
        "t.jsonl",
        "{\"t\":0,\"core\":0,\"tid\":1,\"kind\":\"wake\"}\nnot json\n",
    );
    let out = run(&["trace-stats", s(&tr)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn cli_row_matches_library_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "mix.toml", MIX);
    let args = RunArgs {
        mode: Mode::Sim,
        config: cfg.clone(),
        umt: true,
        seed: None,
        cores: 4,
        trace: None,
        out: None,
    };
    let mut buf = Vec::new();
    let outcome = cli::run_with_env(&args, None, &mut buf).unwrap();
    let spec = WorkloadSpec::load(&cfg).unwrap();
    let direct = run_sim(
        Arc::new(spec.generate().unwrap()),
        &RuntimeConfig {
            seed: 3,
            ..RuntimeConfig::umt(true)
        },
        SimConfig {
            rng_seed: 3,
            ..SimConfig::with_cores(4)
        },
    )
    .unwrap();
    assert_eq!(outcome.report.metrics, direct.metrics);
    assert_eq!(read_rows(&buf[..]).unwrap(), vec![outcome.row]);
}
