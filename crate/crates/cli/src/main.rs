//! `boot`: train toy denoising teachers, distill them into one-step
//! students, sample, evaluate, audit the numerics, and run paired ablations.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Set BOOT_LOG={error,info,debug} to control stderr logging.

mod artifacts;
mod commands;
mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

/// Failures split by whose fault they are: bad invocations and configs exit
/// with 2, failures while executing a valid request exit with 1.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl ToString) -> CliError {
        CliError::Usage(msg.to_string())
    }

    pub fn runtime(msg: impl ToString) -> CliError {
        CliError::Runtime(msg.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<boot_core::BootError> for CliError {
    fn from(e: boot_core::BootError) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "boot", version, about = "Data-free one-step distillation of toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoising teacher on a toy dataset; writes teacher.json plus
    /// a .meta.json sidecar describing dataset, prediction kind, and schedule.
    TrainTeacher(CommonArgs),
    /// Distill a teacher into a one-step student; writes student.json and a
    /// per-step metrics CSV.
    Distill(DistillArgs),
    /// Draw samples with a teacher solver or a distilled student; writes
    /// samples.csv, one row per sample.
    Sample(SampleArgs),
    /// Score a student against its teacher; writes metrics.json and, in two
    /// dimensions, scatter.svg.
    Eval(EvalArgs),
    /// Re-measure every identity the trainer relies on against independent
    /// oracles; non-zero exit if any check fails.
    Verify(VerifyArgs),
    /// Run a paired experiment that flips one training choice and compares
    /// the resulting students.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Student checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured step budget.
    #[arg(long)]
    steps: Option<u64>,
    /// Stop after this step without shrinking the budget; resume later.
    #[arg(long)]
    halt_after: Option<u64>,
    /// Metrics CSV path (default: metrics.csv in the output directory).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Teacher checkpoint (required by the teacher solvers).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student checkpoint (required by --solver student).
    #[arg(long)]
    student: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SolverChoice::Ddim)]
    solver: SolverChoice,
    /// Solver steps; defaults to the config's eval.ddim_steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Number of samples; defaults to the config's eval.n_samples.
    #[arg(long)]
    n: Option<usize>,
    /// Guidance strength; defaults to the config's guidance block.
    #[arg(long)]
    weight: Option<f64>,
    /// Class label to condition on.
    #[arg(long)]
    label: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Student checkpoint.
    #[arg(long)]
    student: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Seed for the randomized checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Which training choice to flip.
    name: AblationName,
    #[command(flatten)]
    common: CommonArgs,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverChoice {
    Ddim,
    SignalEuler,
    SignalHeun,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationName {
    Boundary,
    #[value(name = "time_sampling")]
    TimeSampling,
    Guidance,
    #[value(name = "solver_order")]
    SolverOrder,
}

impl AblationName {
    /// Subdirectory the ablation writes into, same spelling as the CLI name.
    pub fn dir_name(&self) -> &'static str {
        match self {
            AblationName::Boundary => "boundary",
            AblationName::TimeSampling => "time_sampling",
            AblationName::Guidance => "guidance",
            AblationName::SolverOrder => "solver_order",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BOOT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::TrainTeacher(a) => {
            commands::cmd_train_teacher(&a.config, a.seed, a.out.as_deref())
        }
        Command::Distill(a) => commands::cmd_distill(
            &a.common.config,
            a.common.seed,
            a.common.out.as_deref(),
            &a.teacher,
            a.resume.as_deref(),
            a.steps,
            a.halt_after,
            a.log.as_deref(),
        ),
        Command::Sample(a) => commands::cmd_sample(
            &a.common.config,
            a.common.seed,
            a.common.out.as_deref(),
            a.teacher.as_deref(),
            a.student.as_deref(),
            a.solver,
            a.steps,
            a.n,
            a.weight,
            a.label,
        ),
        Command::Eval(a) => commands::cmd_eval(
            &a.common.config,
            a.common.seed,
            a.common.out.as_deref(),
            &a.teacher,
            &a.student,
        ),
        Command::Verify(a) => commands::cmd_verify(a.seed),
        Command::Ablate(a) => commands::cmd_ablate(
            a.name,
            &a.common.config,
            a.common.seed,
            a.common.out.as_deref(),
            &a.teacher,
            a.common.threads,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
