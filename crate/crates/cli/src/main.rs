//! `jdd`: degrade, train, restore, fine-tune and evaluate raw images with
//! the NIG demosaicking/denoising network.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jdd_core::Phase;

#[derive(Parser)]
#[command(name = "jdd", version, about = "Joint demosaicking and denoising with uncertainty")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the fully resolved configuration to stdout and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Force single-threaded numerics. Every path is already single-threaded,
    /// so this only records the request.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Add noise to clean images and write noisy raw mosaics.
    Degrade(commands::DegradeArgs),
    /// Train a network and write its best checkpoint.
    Train(commands::TrainArgs),
    /// Restore a raw mosaic with a trained network.
    Infer(commands::InferArgs),
    /// Adapt a checkpoint to one input without clean data.
    Finetune(commands::FinetuneArgs),
    /// PSNR/SSIM of predictions against references.
    Eval(commands::EvalArgs),
    /// Compare the closed-form loss terms with Monte Carlo estimates.
    ValidateLoss(commands::ValidateLossArgs),
    /// Overfit one image with MSE and with the ELBO and record both curves.
    Overfit(commands::OverfitArgs),
}

#[derive(Debug)]
pub enum CliError {
    Core(jdd_core::Error),
    Io(String),
    Config(String),
    Usage(String),
    /// A numeric check did not pass.
    Validation(String),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Io(_) => "io",
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Validation(_) => "validation",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(m) | CliError::Config(m) | CliError::Usage(m) | CliError::Validation(m) => f.write_str(m),
        }
    }
}

impl From<jdd_core::Error> for CliError {
    fn from(e: jdd_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse::<Phase>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Degrade(a) => commands::degrade(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Infer(a) => commands::infer(&cli.global, a),
        Command::Finetune(a) => commands::finetune(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::ValidateLoss(a) => commands::validate_loss(&cli.global, a),
        Command::Overfit(a) => commands::overfit(&cli.global, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
