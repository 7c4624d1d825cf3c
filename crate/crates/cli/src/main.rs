#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Pretrain a toy diffusion prior on a two-ring mixture, steer it with
/// zero-initialized adapters, and check score identities against closed forms.
///
/// Settings come from `--config` (TOML), then the environment, then flags;
/// later sources win.
#[derive(Parser, Debug)]
#[command(name = "steerlab", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `out_dir` from the configuration.
    #[arg(long, global = true, env = "STEERLAB_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    pub device: Device,
    /// Print what would run without training or writing files.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Device {
    Cpu,
    /// Accepted for compatibility; runs on the CPU.
    Accelerator,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the prior denoiser on the ring mixture.
    Pretrain(commands::PretrainArgs),
    /// Train a steering module against a frozen backbone.
    Finetune(commands::FinetuneArgs),
    /// Generate samples from a backbone, optionally steered.
    Sample(commands::SampleArgs),
    /// Score samples by ring membership.
    Evaluate(commands::EvaluateArgs),
    /// Fine-tune and score every cell of the configured grid.
    Sweep(commands::SweepArgs),
    /// Verify the Bayes split of the conditional denoiser on Gaussian mixtures.
    OracleCheck(commands::OracleArgs),
    /// Encode a box list into a two-channel layout grid.
    EncodeLayout(commands::LayoutArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.global.device == Device::Accelerator {
        eprintln!("warning: no accelerator backend is available; running on the CPU");
    }
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(&cli.global, a),
        Command::Finetune(a) => commands::finetune(&cli.global, a),
        Command::Sample(a) => commands::sample(&cli.global, a),
        Command::Evaluate(a) => commands::evaluate(&cli.global, a),
        Command::Sweep(a) => commands::sweep(&cli.global, a),
        Command::OracleCheck(a) => commands::oracle_check(&cli.global, a),
        Command::EncodeLayout(a) => commands::encode_layout(&cli.global, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
