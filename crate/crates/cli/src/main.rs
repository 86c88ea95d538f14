use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use softgrip::pipeline::{PipelineConfig, Run, Stage};

/// Stiffness and grasp-pose co-design for a tendon-driven soft gripper.
#[derive(Debug, Parser)]
#[command(name = "softgrip", version)]
struct Cli {
    /// Pipeline configuration (JSON, or TOML by extension). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the finger mesh; writes mesh.obj and blocks.json.
    Mesh,
    /// Place tendon waypoints; writes route.json and the pressure profiles.
    Route,
    /// Run one grasp episode; writes trace.csv and outcome.json.
    Simulate,
    /// Sample and refine grasp poses; writes poses/ and candidates.json.
    Poses,
    /// Generate the simulation dataset.
    GenData,
    /// Train the surrogate on the dataset.
    Train,
    /// Optimise the stiffness distribution through the surrogate.
    Codesign,
    /// Pick a grasp pose per object at the co-designed stiffness.
    Select,
    /// Simulate the selected designs and report success rates.
    Evaluate,
    /// Render CSV tables and SVG charts from a finished run.
    Report,
    /// Run every stage in order.
    All,
    /// Print the effective configuration as JSON.
    Config,
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let stage = match cli.command {
        Command::Config => {
            println!("{}", softgrip::pipeline::config_json(&cfg)?);
            return Ok(());
        }
        Command::All => None,
        Command::Mesh => Some(Stage::Mesh),
        Command::Route => Some(Stage::Route),
        Command::Simulate => Some(Stage::Simulate),
        Command::Poses => Some(Stage::Poses),
        Command::GenData => Some(Stage::GenData),
        Command::Train => Some(Stage::Train),
        Command::Codesign => Some(Stage::Codesign),
        Command::Select => Some(Stage::Select),
        Command::Evaluate => Some(Stage::Evaluate),
        Command::Report => Some(Stage::Report),
    };
    let run = Run::new(cfg, &cli.out).with_context(|| format!("preparing {}", cli.out.display()))?;
    let stages: Vec<Stage> = match stage {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    for s in stages {
        let outputs = run.run_stage(s).with_context(|| format!("stage {}", s.name()))?;
        for p in outputs {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
