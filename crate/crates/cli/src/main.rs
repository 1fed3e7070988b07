use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pppc_cli::ablate::{cmd_ablate, AblateArgs, Axis};
use pppc_cli::export::{cmd_export, ExportKind};
use pppc_cli::train::{cmd_train, TrainArgs};
use pppc_cli::verify::{cmd_verify, report, DEFAULT_SEED};
use pppc_cli::{CliError, ExitStatus};

/// Gaussian pixel-embedding contrast experiments.
///
/// Outputs go under $PPPC_OUTPUT_ROOT (default ./runs). Exit status: 0 ok,
/// 1 failed check or ablation member, 2 usage or config error, 3 numeric
/// abort.
#[derive(Parser)]
#[command(name = "pppc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, traces and manifest.
    Train {
        /// TOML config, or a manifest.json of an earlier run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. --set schedule.total_iters=500.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every member of one ablation axis over shared seeds.
    Ablate {
        #[arg(long, value_parser = parse_axis)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        /// Restrict to these members (comma-separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Concurrent member runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the kernel, composition, gradient, closed-form and cropping suites.
    Verify {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Write entropy maps, embeddings or grids from a checkpoint.
    Export {
        #[arg(long, value_parser = parse_kind)]
        what: ExportKind,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse().map_err(|e: CliError| e.message)
}

fn parse_kind(s: &str) -> Result<ExportKind, String> {
    s.parse().map_err(|e: CliError| e.message)
}

fn run(cli: Cli) -> Result<ExitStatus, CliError> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            force,
            out,
        } => {
            let done = cmd_train(&TrainArgs {
                config,
                overrides,
                force,
                out,
            })?;
            println!("{}", done.dir.display());
            Ok(ExitStatus::Success)
        }
        Command::Ablate {
            axis,
            config,
            overrides,
            seeds,
            only,
            jobs,
            force,
            out,
        } => {
            let report = cmd_ablate(&AblateArgs {
                axis,
                config,
                overrides,
                seeds,
                only,
                jobs,
                force,
                out,
            })?;
            print!("{}", pppc_cli::ablate::ablation_csv(&report.rows));
            println!("{}", report.dir.display());
            Ok(if report.any_failed() {
                ExitStatus::Failure
            } else {
                ExitStatus::Success
            })
        }
        Command::Verify { seed } => {
            let checks = cmd_verify(seed)?;
            print!("{}", report(&checks));
            Ok(if checks.iter().all(|c| c.passed) {
                ExitStatus::Success
            } else {
                ExitStatus::Failure
            })
        }
        Command::Export { what, ckpt, out } => {
            for p in cmd_export(what, &ckpt, out.as_deref())? {
                println!("{}", p.display());
            }
            Ok(ExitStatus::Success)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { ExitStatus::Usage.code() } else { 0 });
        }
    };
    match run(cli) {
        Ok(status) => ExitCode::from(status.code()),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.status.code())
        }
    }
}
