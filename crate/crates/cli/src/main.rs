//! `metatrans`: generate synthetic domain pairs, train and ablate, sweep
//! `λ1`, verify the theorems and reproduce the RGRA table.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage, config,
//! format or I/O error, 3 numeric failure during training.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Common, RgraFlags, TrainFlags, VerifyFlags};

#[derive(Parser)]
#[command(name = "metatrans", version, about = "Static-subtraction domain adaptation on frame-feature sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct CommonArgs {
    /// Run configuration (TOML); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; every file of the run is written below it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// full, wo_sub, wo_adv, fs_pooling or source_only.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args, Clone, Debug)]
struct TrainArgs {
    /// Directory holding the four feature files written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    /// Number of classes; inferred from the source labels when absent.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write source/target train/eval feature files and their statics.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one variant; writes model.mtck, report.json and epochs.csv.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train once per λ1 and select on held-out target accuracy.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated λ1 values; defaults to 0.01..0.10.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Run theorem checks; exits 1 when any check fails.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// 1, 3, 4, rgra or all.
        #[arg(long)]
        theorem: Option<String>,
        /// Static estimator: mean, exact or model (needs --checkpoint).
        #[arg(long)]
        oracle: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Feature files with statics; theorem 3 generates the benchmark otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Inputs (theorem 1) or samples per T (theorem 4).
        #[arg(long)]
        samples: Option<usize>,
        /// Theorem 3 at one frame index instead of all frames pooled.
        #[arg(long)]
        frame: Option<usize>,
        /// RGRA table to reproduce.
        #[arg(long)]
        table: Option<String>,
    },
    /// Compute one RGRA value or reproduce the published table.
    Rgra {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        table: Option<String>,
        #[arg(long)]
        a_opt: Option<f64>,
        #[arg(long)]
        a_source_only: Option<f64>,
        #[arg(long)]
        a_target_sup: Option<f64>,
        #[arg(long, default_value_t = 2)]
        n_loss: u32,
        /// fixed_others or greedy.
        #[arg(long, default_value = "fixed_others")]
        mode: String,
    },
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            seed: a.seed,
            out: a.out,
            preset: a.preset,
            variant: a.variant,
        }
    }
}

impl From<TrainArgs> for TrainFlags {
    fn from(a: TrainArgs) -> Self {
        TrainFlags {
            data: a.data,
            epochs: a.epochs,
            lambda1: a.lambda1,
            classes: a.classes,
        }
    }
}

fn run(cli: Cli) -> error::CliResult<()> {
    match cli.command {
        Command::Generate { common } => commands::cmd_generate(&common.into()),
        Command::Train { common, train } => commands::cmd_train(&common.into(), &train.into()),
        Command::Sweep { common, train, grid } => commands::cmd_sweep(&common.into(), &train.into(), grid.as_deref()),
        Command::Verify {
            common,
            theorem,
            oracle,
            checkpoint,
            data,
            samples,
            frame,
            table,
        } => commands::cmd_verify(
            &common.into(),
            &VerifyFlags {
                theorem,
                oracle,
                checkpoint,
                data,
                samples,
                frame,
                table,
            },
        ),
        Command::Rgra {
            common,
            table,
            a_opt,
            a_source_only,
            a_target_sup,
            n_loss,
            mode,
        } => commands::cmd_rgra(
            &common.into(),
            &RgraFlags {
                table,
                a_opt,
                a_source_only,
                a_target_sup,
                n_loss,
                mode,
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
