use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use convbeam_cli::{commands, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "convbeam", version, about = "Convolutional beamforming and attention decoding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured acoustic conditions.
    Simulate(Common),
    /// Run the selected beamformer once per speaker.
    Enhance(Common),
    /// Decode auditory attention trial by trial.
    Decode(Common),
    /// Score the enhanced signals and both selection strategies.
    Evaluate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Simulate(a) | Command::Enhance(a) | Command::Decode(a) | Command::Evaluate(a)) = &cli.command;
    let cfg = PipelineConfig::load(&a.config)?;
    convbeam_cli::artifacts::create_dir(&a.out)?;
    match &cli.command {
        Command::Simulate(a) => commands::simulate(&cfg, &a.out, cfg.seed(a.seed)?),
        Command::Enhance(a) => commands::enhance(&cfg, &a.out),
        Command::Decode(a) => commands::decode(&cfg, &a.out, cfg.seed(a.seed)?),
        Command::Evaluate(a) => commands::evaluate(&cfg, &a.out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.record()).expect("error record serializes"));
            ExitCode::FAILURE
        }
    }
}
