//! Command-line front end: `run`, `compare` and `trace-stats`.
//!
//! # Metrics CSV
//!
//! `run` writes a header and one row per run. Columns, in order:
//!
//! | column                      | source                                        |
//! |-----------------------------|-----------------------------------------------|
//! | `workload`                  | workload spec `id`                            |
//! | `mode`                      | `sim` or `live`                               |
//! | `umt`                       | `true` / `false`                              |
//! | `seed`                      | resolved seed                                 |
//! | `cores`                     | core count                                    |
//! | `tasks`                     | `MetricsReport::tasks`                        |
//! | `makespan_us`               | `MetricsReport::makespan_us`                  |
//! | `utilization`               | `MetricsReport::utilization`                  |
//! | `oversubscription`          | `MetricsReport::oversubscription`             |
//! | `max_core_oversubscription` | `MetricsReport::max_core_oversubscription`    |
//! | `per_core_utilization`      | `MetricsReport::per_core_utilization`, `;`-joined |
//! | `per_core_oversubscription` | `MetricsReport::per_core_oversubscription`, `;`-joined |
//! | `context_switches`          | `MetricsReport::context_switches`             |
//! | `leader_wakeups`            | `MetricsReport::leader_wakeups`               |
//! | `events_blocked`            | `MetricsReport::events_blocked`               |
//! | `events_unblocked`          | `MetricsReport::events_unblocked`             |
//! | `workers`                   | `MetricsReport::workers`                      |
//! | `surrenders`                | `MetricsReport::surrenders`                   |
//!
//! # Comparison CSV
//!
//! `compare` emits long format: `workload,seed,cores,variant,metric,value`
//! where `variant` is `baseline`, `umt` or `comparison`. Comparison rows
//! carry `speedup_pct` and `utilization_delta`.
//!
//! # Trace stats CSV
//!
//! `trace-stats` emits one row per core plus a `total` row; see
//! [`CoreTraceStats`].
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 stalled run,
//! 1 anything else. `UMT_SEED` overrides the workload seed when `--seed` is
//! absent.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{speedup, MetricsReport};
use crate::runtime::{run_live, run_sim, LiveConfig, RunReport, RuntimeConfig, RuntimeError};
use crate::sim::SimConfig;
use crate::trace::{self, TraceError, TraceKind, TraceRecord};
use crate::workloads::{WorkloadError, WorkloadSpec};

pub const SEED_ENV: &str = "UMT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sim,
    Live,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Mode::Sim),
            "live" => Ok(Mode::Live),
            other => Err(format!("unknown mode {other:?} (expected sim or live)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Runtime(RuntimeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Trace {
        path: String,
        #[source]
        source: TraceError,
    },
    #[error("mismatched runs: {0}")]
    MismatchedRuns(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::Workload(_)
            | CliError::Csv { .. }
            | CliError::Trace { .. }
            | CliError::MismatchedRuns(_) => 2,
            CliError::Runtime(RuntimeError::Stalled { .. }) => 3,
            CliError::Runtime(RuntimeError::Config(_)) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        CliError::Runtime(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArgs {
    pub mode: Mode,
    pub config: PathBuf,
    pub umt: bool,
    pub seed: Option<u64>,
    pub cores: usize,
    pub trace: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// `--seed`, else `UMT_SEED`, else the workload's own seed.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, spec_seed: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(spec_seed),
    }
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub workload: String,
    pub mode: Mode,
    pub umt: bool,
    pub seed: u64,
    pub cores: usize,
    pub tasks: usize,
    pub makespan_us: u64,
    pub utilization: f64,
    pub oversubscription: f64,
    pub max_core_oversubscription: f64,
    pub per_core_utilization: String,
    pub per_core_oversubscription: String,
    pub context_switches: u64,
    pub leader_wakeups: u64,
    pub events_blocked: u64,
    pub events_unblocked: u64,
    pub workers: usize,
    pub surrenders: u64,
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn split(s: &str) -> Result<Vec<f64>, std::num::ParseFloatError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(str::parse).collect()
}

impl MetricsRow {
    pub fn new(
        workload: &str,
        mode: Mode,
        umt: bool,
        seed: u64,
        cores: usize,
        m: &MetricsReport,
    ) -> Self {
        Self {
            workload: workload.to_owned(),
            mode,
            umt,
            seed,
            cores,
            tasks: m.tasks,
            makespan_us: m.makespan_us,
            utilization: m.utilization,
            oversubscription: m.oversubscription,
            max_core_oversubscription: m.max_core_oversubscription,
            per_core_utilization: join(&m.per_core_utilization),
            per_core_oversubscription: join(&m.per_core_oversubscription),
            context_switches: m.context_switches,
            leader_wakeups: m.leader_wakeups,
            events_blocked: m.events_blocked,
            events_unblocked: m.events_unblocked,
            workers: m.workers,
            surrenders: m.surrenders,
        }
    }

    pub fn metrics(&self) -> Result<MetricsReport, std::num::ParseFloatError> {
        Ok(MetricsReport {
            per_core_utilization: split(&self.per_core_utilization)?,
            per_core_oversubscription: split(&self.per_core_oversubscription)?,
            utilization: self.utilization,
            oversubscription: self.oversubscription,
            max_core_oversubscription: self.max_core_oversubscription,
            context_switches: self.context_switches,
            leader_wakeups: self.leader_wakeups,
            makespan_us: self.makespan_us,
            events_blocked: self.events_blocked,
            events_unblocked: self.events_unblocked,
            workers: self.workers,
            surrenders: self.surrenders,
            tasks: self.tasks,
        })
    }

    /// Tasks per second.
    pub fn throughput(&self) -> f64 {
        if self.makespan_us == 0 {
            0.0
        } else {
            self.tasks as f64 * 1e6 / self.makespan_us as f64
        }
    }
}

pub fn write_rows<W: Write>(out: W, rows: &[MetricsRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<MetricsRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: MetricsRow,
    pub report: RunReport,
}

/// Runs one experiment. The row goes to `args.out` or, when absent, `stdout`.
pub fn cmd_run<W: Write>(args: &RunArgs, stdout: W) -> Result<RunOutcome, CliError> {
    let env = std::env::var(SEED_ENV).ok();
    run_with_env(args, env.as_deref(), stdout)
}

/// [`cmd_run`] with the seed environment passed explicitly.
pub fn run_with_env<W: Write>(
    args: &RunArgs,
    seed_env: Option<&str>,
    stdout: W,
) -> Result<RunOutcome, CliError> {
    if args.cores == 0 {
        return Err(CliError::Config("--cores must be at least 1".into()));
    }
    let mut spec = WorkloadSpec::load(&args.config)?;
    let seed = resolve_seed(args.seed, seed_env, spec.seed)?;
    spec.seed = seed;
    let graph = Arc::new(spec.generate()?);
    let rt = RuntimeConfig {
        seed,
        ..RuntimeConfig::umt(args.umt)
    };
    log::info!(
        "{} {:?} umt={} seed={seed} cores={} tasks={}",
        spec.id,
        args.mode,
        args.umt,
        args.cores,
        graph.len()
    );
    let report = match args.mode {
        Mode::Sim => {
            let sim = SimConfig {
                rng_seed: seed,
                trace: args.trace.is_some(),
                ..SimConfig::with_cores(args.cores)
            };
            run_sim(graph, &rt, sim)?
        }
        Mode::Live => {
            let live = LiveConfig {
                trace: args.trace.is_some(),
                ..LiveConfig::new(args.cores, rt)
            };
            run_live(graph, &live)?
        }
    };
    if let Some(path) = &args.trace {
        let f = File::create(path).map_err(io_err(path))?;
        trace::write_jsonl(BufWriter::new(f), &report.trace).map_err(io_err(path))?;
    }
    let row = MetricsRow::new(
        &spec.id,
        args.mode,
        args.umt,
        seed,
        args.cores,
        &report.metrics,
    );
    let rows = std::slice::from_ref(&row);
    match &args.out {
        Some(path) => {
            let f = File::create(path).map_err(io_err(path))?;
            write_rows(f, rows)
        }
        None => write_rows(stdout, rows),
    }
    .map_err(|source| CliError::Csv {
        path: args
            .out
            .as_ref()
            .map_or("<stdout>".into(), |p| p.display().to_string()),
        source,
    })?;
    Ok(RunOutcome { row, report })
}

/// One baseline/UMT pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub workload: String,
    pub seed: u64,
    pub cores: usize,
    pub baseline: MetricsRow,
    pub umt: MetricsRow,
    /// `umt_throughput / baseline_throughput - 1`, as a fraction.
    pub speedup: f64,
    pub utilization_delta: f64,
}

/// Pairs rows by `(workload, seed, cores)`.
pub fn compare_rows(
    baseline: &[MetricsRow],
    umt: &[MetricsRow],
) -> Result<Vec<Comparison>, CliError> {
    type Key = (String, u64, usize);
    let index = |rows: &[MetricsRow], what: &str| -> Result<BTreeMap<Key, MetricsRow>, CliError> {
        let mut m = BTreeMap::new();
        for r in rows {
            let key = (r.workload.clone(), r.seed, r.cores);
            if m.insert(key.clone(), r.clone()).is_some() {
                return Err(CliError::MismatchedRuns(format!(
                    "duplicate {what} row for workload {} seed {} cores {}",
                    key.0, key.1, key.2
                )));
            }
        }
        Ok(m)
    };
    let b = index(baseline, "baseline")?;
    let u = index(umt, "umt")?;
    if b.is_empty() {
        return Err(CliError::MismatchedRuns("no baseline rows".into()));
    }
    let bk: Vec<_> = b.keys().collect();
    let uk: Vec<_> = u.keys().collect();
    if bk != uk {
        return Err(CliError::MismatchedRuns(format!(
            "baseline runs {bk:?} vs umt runs {uk:?}"
        )));
    }
    let mut out = Vec::with_capacity(b.len());
    for (key, br) in &b {
        let ur = &u[key];
        if br.tasks != ur.tasks {
            return Err(CliError::MismatchedRuns(format!(
                "workload {} ran {} tasks in baseline and {} with umt",
                key.0, br.tasks, ur.tasks
            )));
        }
        out.push(Comparison {
            workload: key.0.clone(),
            seed: key.1,
            cores: key.2,
            baseline: br.clone(),
            umt: ur.clone(),
            // equal task counts, so the throughput ratio is the makespan ratio
            speedup: speedup(br.makespan_us as f64, ur.makespan_us as f64),
            utilization_delta: ur.utilization - br.utilization,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct LongRow<'a> {
    workload: &'a str,
    seed: u64,
    cores: usize,
    variant: &'a str,
    metric: &'a str,
    value: f64,
}

pub fn write_comparison<W: Write>(out: W, cmp: &[Comparison]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for c in cmp {
        for (variant, r) in [("baseline", &c.baseline), ("umt", &c.umt)] {
            let metrics: [(&str, f64); 8] = [
                ("makespan_us", r.makespan_us as f64),
                ("throughput", r.throughput()),
                ("utilization", r.utilization),
                ("oversubscription", r.oversubscription),
                ("max_core_oversubscription", r.max_core_oversubscription),
                ("context_switches", r.context_switches as f64),
                ("leader_wakeups", r.leader_wakeups as f64),
                ("workers", r.workers as f64),
            ];
            for (metric, value) in metrics {
                w.serialize(LongRow {
                    workload: &c.workload,
                    seed: c.seed,
                    cores: c.cores,
                    variant,
                    metric,
                    value,
                })?;
            }
        }
        for (metric, value) in [
            ("speedup_pct", c.speedup * 100.0),
            ("utilization_delta", c.utilization_delta),
        ] {
            w.serialize(LongRow {
                workload: &c.workload,
                seed: c.seed,
                cores: c.cores,
                variant: "comparison",
                metric,
                value,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_rows(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_rows(BufReader::new(f)).map_err(|source| CliError::Csv {
        path: path.display().to_string(),
        source,
    })
}

/// Compares two metrics CSVs and writes the long-format report to `out`.
pub fn cmd_compare<W: Write>(
    baseline: &Path,
    umt: &Path,
    out: W,
) -> Result<Vec<Comparison>, CliError> {
    let cmp = compare_rows(&load_rows(baseline)?, &load_rows(umt)?)?;
    write_comparison(out, &cmp).map_err(|source| CliError::Csv {
        path: "<stdout>".into(),
        source,
    })?;
    Ok(cmp)
}

/// Per-core summary reconstructed from a trace.
///
/// Runnable threads on a core are tracked from `wake` (+1), `migrate`
/// (moves one from `from`) and non-compensation `block` (-1) records; the
/// running thread from `dispatch`. Time is charged exactly like the
/// simulator clock: idle with nothing running, oversubscribed with two or
/// more runnable, busy otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CoreTraceStats {
    pub core: String,
    pub dispatches: u64,
    pub blocks: u64,
    pub unblocks: u64,
    pub compensations: u64,
    pub wakes: u64,
    pub migrations_in: u64,
    pub surrenders: u64,
    pub busy_us: u64,
    pub oversubscribed_us: u64,
    pub oversubscription_periods: u64,
    pub longest_period_us: u64,
    pub oversubscription: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceStats {
    pub per_core: Vec<CoreTraceStats>,
    pub total: CoreTraceStats,
    /// Channel writes: `block` records with `umt`, and `unblock` records.
    pub events_blocked: u64,
    pub events_unblocked: u64,
    pub end_us: u64,
}

#[derive(Debug, Clone, Default)]
struct CoreTrack {
    runnable: i64,
    running: Option<u32>,
    period_start: Option<u64>,
}

pub fn trace_stats(records: &[TraceRecord]) -> TraceStats {
    let n = records
        .iter()
        .map(|r| r.core.max(r.extra.from.unwrap_or(0)) + 1)
        .max()
        .unwrap_or(0);
    let mut per: Vec<CoreTraceStats> = (0..n)
        .map(|c| CoreTraceStats {
            core: c.to_string(),
            ..CoreTraceStats::default()
        })
        .collect();
    let mut track = vec![CoreTrack::default(); n];
    let mut now = 0u64;
    let mut stats = TraceStats::default();

    let charge = |per: &mut [CoreTraceStats], track: &[CoreTrack], dt: u64| {
        for (s, t) in per.iter_mut().zip(track) {
            if t.running.is_none() {
                continue;
            }
            if t.runnable >= 2 {
                s.oversubscribed_us += dt;
            } else {
                s.busy_us += dt;
            }
        }
    };
    let over = |t: &CoreTrack| t.running.is_some() && t.runnable >= 2;

    for r in records {
        if r.t > now {
            charge(&mut per, &track, r.t - now);
            now = r.t;
        }
        let before: Vec<bool> = track.iter().map(over).collect();
        let c = r.core;
        match r.kind {
            TraceKind::Dispatch => {
                per[c].dispatches += 1;
                track[c].running = Some(r.tid);
            }
            TraceKind::Block => {
                if r.extra.compensation == Some(true) {
                    per[c].compensations += 1;
                } else {
                    per[c].blocks += 1;
                    track[c].runnable -= 1;
                    if track[c].running == Some(r.tid) {
                        track[c].running = None;
                    }
                }
                if r.extra.umt == Some(true) {
                    stats.events_blocked += 1;
                }
            }
            TraceKind::Unblock => {
                per[c].unblocks += 1;
                stats.events_unblocked += 1;
            }
            TraceKind::Wake => {
                per[c].wakes += 1;
                track[c].runnable += 1;
            }
            TraceKind::Migrate => {
                per[c].migrations_in += 1;
                track[c].runnable += 1;
                if let Some(from) = r.extra.from {
                    track[from].runnable -= 1;
                    if track[from].running == Some(r.tid) {
                        track[from].running = None;
                    }
                }
            }
            TraceKind::Surrender => per[c].surrenders += 1,
        }
        for (i, t) in track.iter_mut().enumerate() {
            let is_over = t.running.is_some() && t.runnable >= 2;
            match (before[i], is_over) {
                (false, true) => t.period_start = Some(now),
                (true, false) => {
                    let start = t.period_start.take().unwrap_or(now);
                    let len = now - start;
                    if len > 0 {
                        per[i].oversubscription_periods += 1;
                        per[i].longest_period_us = per[i].longest_period_us.max(len);
                    }
                }
                _ => {}
            }
        }
    }
    for (i, t) in track.iter_mut().enumerate() {
        if let Some(start) = t.period_start.take() {
            let len = now - start;
            if len > 0 {
                per[i].oversubscription_periods += 1;
                per[i].longest_period_us = per[i].longest_period_us.max(len);
            }
        }
    }
    let mut total = CoreTraceStats {
        core: "total".into(),
        ..CoreTraceStats::default()
    };
    for s in &mut per {
        s.oversubscription = fraction(s.oversubscribed_us, now);
        total.dispatches += s.dispatches;
        total.blocks += s.blocks;
        total.unblocks += s.unblocks;
        total.compensations += s.compensations;
        total.wakes += s.wakes;
        total.migrations_in += s.migrations_in;
        total.surrenders += s.surrenders;
        total.busy_us += s.busy_us;
        total.oversubscribed_us += s.oversubscribed_us;
        total.oversubscription_periods += s.oversubscription_periods;
        total.longest_period_us = total.longest_period_us.max(s.longest_period_us);
    }
    total.oversubscription = if per.is_empty() {
        0.0
    } else {
        per.iter().map(|s| s.oversubscription).sum::<f64>() / per.len() as f64
    };
    stats.per_core = per;
    stats.total = total;
    stats.end_us = now;
    stats
}

fn fraction(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

pub fn write_trace_stats<W: Write>(out: W, stats: &TraceStats) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats.per_core.iter().chain(std::iter::once(&stats.total)) {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Summarizes a JSON-lines trace file and writes the per-core CSV to `out`.
pub fn cmd_trace_stats<W: Write>(path: &Path, out: W) -> Result<TraceStats, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    let records = trace::read_jsonl(BufReader::new(f)).map_err(|source| CliError::Trace {
        path: path.display().to_string(),
        source,
    })?;
    let stats = trace_stats(&records);
    write_trace_stats(out, &stats).map_err(|source| CliError::Csv {
        path: "<stdout>".into(),
        source,
    })?;
    Ok(stats)
}
