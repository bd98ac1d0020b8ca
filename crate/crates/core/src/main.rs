use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patientsim::pipeline::{run_all, run_stage, RunConfig, Stage};
use patientsim::Error;

/// Train and evaluate a patient-trajectory simulator and a DQN agent inside it.
#[derive(Parser, Debug)]
#[command(name = "patientsim", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON); missing keys take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one config key, e.g. `--set agent.dqn.total_steps=5000`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic cohort (cohort.csv)
    SynthData,
    /// Train the VAE and AE encoders
    TrainVae,
    /// Train one state model per configured variant
    TrainState,
    /// Train termination and outcome heads for each state representation
    TrainHeads,
    /// Closed-loop replays of held-out episodes under the recorded actions
    Rollout,
    /// Train the DQN agent inside the simulator
    TrainAgent,
    /// Teacher-forced and closed-loop evaluation, NTM and policy histograms
    Eval,
    /// NTM report only
    Ntm,
    /// Run synth-data through eval
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::SynthData => Stage::SynthData,
            Command::TrainVae => Stage::TrainVae,
            Command::TrainState => Stage::TrainState,
            Command::TrainHeads => Stage::TrainHeads,
            Command::Rollout => Stage::Rollout,
            Command::TrainAgent => Stage::TrainAgent,
            Command::Eval => Stage::Eval,
            Command::Ntm => Stage::Ntm,
            Command::All => return None,
        })
    }
}

fn resolve_config(cli: &Cli) -> patientsim::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg = cfg.with_override(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command.stage() {
        Some(stage) => run_stage(stage, &cfg, &cli.out).map(|_| ()),
        None => run_all(&cfg, &cli.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
