//! Command-line front end for the teacher-guided one-shot pruning pipeline.
//!
//! Exit codes: 0 success, 1 config error, 2 data/format error, 3 numerical
//! failure, 4 missing artifact.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{Ctx, RetrainMode};
use sparsedistill::error::Error;

#[derive(Parser)]
#[command(name = "sparsedistill", version, about = "Teacher-guided one-shot pruning")]
struct Cli {
    /// Experiment config file (sectioned key=value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for single-run commands; defaults to the first [run] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; defaults to [run] out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Floating-point precision for the whole run.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Plain,
    Kd,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense teacher on cross-entropy.
    TrainTeacher,
    /// Fine-tune a dense student under the teacher with the combined loss.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Compute teacher-guided importance scores for a dense student.
    Score {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
    /// One-shot global prune at a sparsity target.
    Prune {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Sparsity in [0,1); defaults to the first [prune] target.
        #[arg(long)]
        sparsity: Option<f64>,
    },
    /// Retrain a pruned student under its frozen mask.
    Retrain {
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Teacher checkpoint; required for --mode kd.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the full method comparison grid and emit report tables.
    Compare,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Dimension(_)
        | Error::Contract(_)
        | Error::Validation(_)
        | Error::Format { .. }
        | Error::Io(_) => 2,
        Error::Numerical(_) => 3,
        Error::MissingArtifact(_) => 4,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = config::load_config(&config_path)?;
    if let Some(p) = &cli.precision {
        cfg.precision = p.parse().unwrap();
    }
    let precision = cfg.precision;
    let ctx = Ctx::new(cfg, cli.out.clone(), cli.seed);

    macro_rules! dispatch {
        ($f:ident ( $($arg:expr),* )) => {
            match precision {
                64 => commands::$f::<f64>(&ctx $(, $arg)*),
                _ => commands::$f::<f32>(&ctx $(, $arg)*),
            }
        };
    }

    match &cli.command {
        Command::TrainTeacher => dispatch!(cmd_train_teacher()),
        Command::Distill { teacher } => dispatch!(cmd_distill(teacher)),
        Command::Score { teacher, student } => dispatch!(cmd_score(teacher, student)),
        Command::Prune {
            student,
            scores,
            sparsity,
        } => dispatch!(cmd_prune(student, scores, *sparsity)),
        Command::Retrain {
            pruned,
            mask,
            mode,
            teacher,
        } => {
            let mode = match mode {
                Mode::Plain => RetrainMode::Plain,
                Mode::Kd => RetrainMode::Kd,
            };
            dispatch!(cmd_retrain(pruned, mask, mode, teacher.as_deref()))
        }
        Command::Eval { ckpt, split } => dispatch!(cmd_eval(ckpt, split)),
        Command::Compare => dispatch!(cmd_compare()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
