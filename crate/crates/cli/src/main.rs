use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use caki_core::bank::KeyTemplate;
use caki_core::eval::SweepParameter;
use caki_core::qkpm::{GammaMode, Strategy};
use caki_core::CakiError;

mod commands;
mod config;

use config::PipelineConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CakiError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(CakiError::Format { .. }) => 3,
            CliError::Core(CakiError::FingerprintMismatch { .. }) => 4,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "caki", version, about = "Class-specific prompt bank with query-key prompt matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    M,
    R,
    A,
}

#[derive(Clone, Copy, ValueEnum)]
enum KeyTemplateArg {
    Shared,
    Handcrafted,
}

#[derive(Clone, Copy, ValueEnum)]
enum GammaArg {
    Raw,
    Topk,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Beta,
    K,
    Tau,
}

/// Options shared by commands that read a pipeline config.
#[derive(clap::Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated split seeds, replacing `split.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    key_template: Option<KeyTemplateArg>,
}

/// Inference overrides.
#[derive(clap::Args)]
struct Inference {
    #[arg(long, value_enum, default_value = "m")]
    strategy: StrategyArg,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long, value_enum)]
    gamma_renorm: Option<GammaArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic world's features to an offline feature file.
    GenTask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the shared and class-specific prompts and save the bank.
    TrainBank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Base/novel evaluation for every seed; trains per seed unless --bank is given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
        /// Evaluate this bank instead of training one per seed.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// CSV output, replacing `output.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one hyperparameter over a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
        #[arg(long, value_enum)]
        param: ParamArg,
        /// Comma-separated grid; defaults to the standard grid for the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a bank's header and per-entry norms.
    InspectBank { path: PathBuf },
}

fn load(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(seeds) = &common.seeds {
        config.split.seeds = seeds.clone();
    }
    if let Some(k) = common.key_template {
        config.qkpm.key_template = match k {
            KeyTemplateArg::Shared => KeyTemplate::Shared,
            KeyTemplateArg::Handcrafted => KeyTemplate::Handcrafted,
        };
    }
    Ok(config)
}

fn apply(config: &mut PipelineConfig, inference: &Inference) -> Strategy {
    if let Some(beta) = inference.beta {
        config.qkpm.beta = beta;
    }
    if let Some(k) = inference.topk {
        config.qkpm.top_k = k;
    }
    if let Some(g) = inference.gamma_renorm {
        config.qkpm.gamma_mode = match g {
            GammaArg::Raw => GammaMode::Raw,
            GammaArg::Topk => GammaMode::Topk,
        };
    }
    match inference.strategy {
        StrategyArg::M => Strategy::Matching,
        StrategyArg::R => Strategy::Random,
        StrategyArg::A => Strategy::All,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenTask { common, out } => {
            let config = load(&common)?;
            config.validate()?;
            commands::gen_task(&config, out)
        }
        Command::TrainBank { common, out } => {
            let config = load(&common)?;
            config.validate()?;
            commands::train(&config, out)
        }
        Command::Eval { common, inference, bank, out } => {
            let mut config = load(&common)?;
            let strategy = apply(&mut config, &inference);
            config.validate()?;
            commands::eval(&config, bank, strategy, out)
        }
        Command::Sweep { common, inference, param, values, out } => {
            let mut config = load(&common)?;
            let strategy = apply(&mut config, &inference);
            config.validate()?;
            let parameter = match param {
                ParamArg::Beta => SweepParameter::Beta,
                ParamArg::K => SweepParameter::TopK,
                ParamArg::Tau => SweepParameter::Tau,
            };
            commands::run_sweep(&config, parameter, values, strategy, out)
        }
        Command::InspectBank { path } => commands::inspect(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
