//! `gsc` command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod manifest;
pub mod plot;

pub use config::{RunConfig, ScenarioArgs};
pub use error::CliError;

use commands::{FaultArg, SweepParam};

#[derive(Debug, Parser)]
#[command(name = "gsc", version, about = "Incremental semantic segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and evaluate methods over a scenario.
    Run(RunArgs),
    /// Finite-difference check of every op and loss.
    Gradcheck(GradcheckArgs),
    /// Compare prototype-checked and entropy-only pseudo labels for one step.
    AuditLabels(AuditArgs),
    /// Render mIoU per step from a report directory as SVG.
    Plot(PlotArgs),
    /// Run GSC for several values of one loss weight.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Comma-separated: gsc, ft, plain, joint.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long = "out_dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Random trials per component.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "inject-fault", hide = true)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Model trained up to the step before `--step`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub step: usize,
    /// Number of images whose label maps are written.
    #[arg(long, default_value_t = 4)]
    pub images: usize,
    #[arg(long = "out_dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Directory holding summary.csv.
    pub report_dir: PathBuf,
    /// Defaults to the report directory.
    #[arg(long = "out_dir")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
    #[arg(long = "out_dir")]
    pub out_dir: PathBuf,
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(a) => commands::run(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::AuditLabels(a) => commands::audit(a),
        Command::Plot(a) => commands::plot(a),
        Command::Sweep(a) => commands::sweep(a),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
