mod commands;
mod rundir;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "pmkd", version, about = "Pacemaker knowledge distillation for 1xN on-the-fly CNNs")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Opts {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable), e.g. `--set rho=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Required by training commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    arch: Option<String>,
    #[arg(long, global = true)]
    filter_mode: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    test_dataset: Option<PathBuf>,
    /// Teacher checkpoint.
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
    /// Run seeds seed..seed+k-1 and report each accuracy, the mean and deviations.
    #[arg(long, global = true, default_value_t = 1)]
    repeat: usize,
    /// With --repeat: use the same seed for every run.
    #[arg(long, global = true)]
    same_seed: bool,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    /// Don't echo per-epoch metrics to stdout.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Supervised training of a model (the N×N teacher by default).
    TrainTeacher,
    /// All three distillation phases from a trained teacher.
    RunPipeline,
    /// One phase on its own.
    RunPhase {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=3))]
        phase: u8,
        /// Pacemaker checkpoint (phase 2).
        #[arg(long)]
        pacemaker: Option<PathBuf>,
        /// Phase-3 starting point: a pacemaker checkpoint (row member is transplanted)
        /// or a student checkpoint. Without it phase 3 is plain KD from a fresh student.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on --dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full pipeline for every rho in the sweep.
    SweepRho,
    /// Row-by-row inference of one raw 8-bit image.
    StreamInfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raw rows (width·channels bytes each, channel-major); `-` reads stdin.
        #[arg(long, default_value = "-")]
        input: String,
    },
    /// Compare streaming and batch logits on random or dataset images.
    EquivCheck {
        /// Student checkpoint; randomly initialized from --seed when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Convert CIFAR binaries (or validate pre-converted SVHN containers).
    ImportDataset {
        #[arg(long, value_enum)]
        format: ImportFormat,
        /// Directory holding the source files.
        #[arg(long)]
        input: PathBuf,
        /// Directory receiving train.otfd and test.otfd.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts of teacher and student builds.
    ParamReport {
        /// Report every supported architecture.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Write a synthetic CIFAR-layout dataset (train.otfd, test.otfd).
    SynthDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ImportFormat {
    Cifar10,
    Cifar100,
    Svhn,
}

/// Invalid configuration or arguments; exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.downcast_ref::<ConfigError>().is_some()
        || matches!(e.downcast_ref::<pmkd::Error>(), Some(pmkd::Error::Config { .. }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli.opts, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("pmkd: {msg}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
