use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use umt::cli::{self, CliError, Mode, RunArgs};

#[derive(Parser)]
#[command(
    name = "umt",
    version,
    about = "Monitored-thread task runtime experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sim,
    Live,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one workload and write a metrics CSV row.
    Run {
        #[arg(value_enum)]
        mode: ModeArg,
        /// Workload config (TOML).
        config: PathBuf,
        #[arg(long, value_enum, default_value = "on")]
        umt: OnOff,
        /// Overrides UMT_SEED and the workload seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        cores: usize,
        /// Write a JSON-lines trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare baseline and UMT metrics CSVs.
    Compare { baseline: PathBuf, umt: PathBuf },
    /// Summarize a JSON-lines trace per core.
    TraceStats { trace: PathBuf },
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    let stdout = std::io::stdout().lock();
    match cmd {
        Cmd::Run {
            mode,
            config,
            umt,
            seed,
            cores,
            trace,
            out,
        } => {
            let args = RunArgs {
                mode: match mode {
                    ModeArg::Sim => Mode::Sim,
                    ModeArg::Live => Mode::Live,
                },
                config,
                umt: matches!(umt, OnOff::On),
                seed,
                cores,
                trace,
                out,
            };
            cli::cmd_run(&args, stdout)?;
        }
        Cmd::Compare { baseline, umt } => {
            for c in cli::cmd_compare(&baseline, &umt, stdout)? {
                eprintln!(
                    "{} seed={} cores={}: speedup {:.1}%, utilization {:.3} -> {:.3}, oversubscription {:.4} (max core {:.4})",
                    c.workload,
                    c.seed,
                    c.cores,
                    c.speedup * 100.0,
                    c.baseline.utilization,
                    c.umt.utilization,
                    c.umt.oversubscription,
                    c.umt.max_core_oversubscription,
                );
            }
        }
        Cmd::TraceStats { trace } => {
            cli::cmd_trace_stats(&trace, stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
