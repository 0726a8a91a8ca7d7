// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line driver for the experiment pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use polyprobe::harness::{in_stage, ExperimentConfig, Family, Pipeline, Stage};
use polyprobe::Error;

const EXIT_STAGE_FAILURE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "polyprobe", version, about = "Polysemantic interference experiments on toy transformers")]
struct Cli {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to runs/<run_id>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Derive every seed from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace an existing run directory created by another config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Every stage in order.
    Run,
    /// Print the effective config as JSON.
    Config,
    /// Generate the planted corpus.
    GenCorpus,
    /// Train both toy models.
    TrainModel,
    /// Train an SAE on each model.
    TrainSae,
    /// Interference, clusters, neuron profiles, shared pairs and targets.
    Analyze,
    /// Run intervention trials.
    Intervene {
        #[arg(value_enum, default_value_t = FamilyArg::All)]
        family: FamilyArg,
    },
    /// Aggregate outcome logs into report.json and CSV tables.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Feature,
    Gradient,
    Inject,
    Neuron,
    All,
}

impl FamilyArg {
    fn families(self) -> Vec<Family> {
        match self {
            FamilyArg::Feature => vec![Family::Feature],
            FamilyArg::Gradient => vec![Family::Gradient],
            FamilyArg::Inject => vec![Family::Inject],
            FamilyArg::Neuron => vec![Family::Neuron],
            FamilyArg::All => Family::ALL.to_vec(),
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    config.validate()?;
    Ok(config)
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("POLYPROBE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("POLYPROBE_THREADS={v} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let config = load_config(&cli)?;
    if let Command::Config = cli.command {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&config.run_id));
    let pipeline = Pipeline::open(config, &out, cli.force)?;
    let (stage, result) = match cli.command {
        Command::Config => unreachable!(),
        Command::Run => {
            let report = pipeline.run_all()?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(());
        }
        Command::GenCorpus => (Stage::TrainModel, pipeline.gen_corpus()),
        Command::TrainModel => (Stage::TrainModel, pipeline.train_models()),
        Command::TrainSae => (Stage::TrainSae, pipeline.train_saes()),
        Command::Analyze => (Stage::Analyze, pipeline.analyze()),
        Command::Intervene { family } => (Stage::Intervene, pipeline.intervene(&family.families())),
        Command::Report => {
            let report = pipeline.report()?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(());
        }
    };
    result.map_err(in_stage(stage))?;
    println!("{} done: {}", stage.name(), out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::StageFailure { .. }) => EXIT_STAGE_FAILURE,
        Some(Error::InvalidConfig(_) | Error::RunDirConflict(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
