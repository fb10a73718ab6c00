use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use refloc_cli::{Outcome, Pipeline, PipelineConfig, Stage};

/// Reference-only UAV geo-localization pipeline.
///
/// Every stage reads and writes inside the working directory and records
/// what it consumed in `manifest.json`; a stage whose inputs and settings
/// are unchanged is skipped unless `--force` is given.
#[derive(Parser)]
#[command(name = "refloc", version)]
struct Cli {
    /// Pipeline configuration (TOML). Built-in defaults apply otherwise.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Working directory; overrides `paths.workdir`.
    #[arg(long, short, global = true)]
    workdir: Option<PathBuf>,

    /// Reset training constants to the published values (100 epochs,
    /// full augmentation ranges) before applying `--set`.
    #[arg(long, global = true)]
    paper_defaults: bool,

    /// Override one setting, e.g. `--set train.epochs=5`. Repeatable; give
    /// every override before the subcommand.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Rerun the stage even if the manifest says it is up to date.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic raster, trajectory and shifted query set.
    Synth,
    /// Tile the search zone around the trajectory and extract reference crops.
    BuildRefdb,
    /// Train the autoencoder on reference tiles.
    Pretrain,
    /// Fine-tune the pretrained encoder with the VICRegL objective.
    Finetune,
    /// Embed every reference tile into the index.
    Index,
    /// Retrieve the top-K tiles for each query image.
    Localize,
    /// Score localization results against ground truth.
    Evaluate,
    /// Run the ablation matrix over the configured variants and seeds.
    Ablate,
    /// Run every stage from `build-refdb` to `evaluate`.
    All,
    /// Print the resolved configuration as TOML.
    ShowConfig,
    /// Print the JSON Schema of the configuration file.
    #[cfg(feature = "schema")]
    Schema,
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides;
    if let Some(w) = &cli.workdir {
        overrides.push(format!("paths.workdir={}", toml::Value::String(w.to_string_lossy().into_owned())));
    }
    let config = PipelineConfig::resolve(cli.config.as_deref(), cli.paper_defaults, &overrides)?;
    let stages: Vec<Stage> = match cli.command {
        Command::ShowConfig => {
            print!("{}", config.to_toml()?);
            return Ok(());
        }
        #[cfg(feature = "schema")]
        Command::Schema => {
            print!("{}", refloc_cli::config_schema());
            return Ok(());
        }
        Command::Synth => vec![Stage::Synth],
        Command::BuildRefdb => vec![Stage::BuildRefdb],
        Command::Pretrain => vec![Stage::Pretrain],
        Command::Finetune => vec![Stage::Finetune],
        Command::Index => vec![Stage::Index],
        Command::Localize => vec![Stage::Localize],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Ablate => vec![Stage::Ablate],
        Command::All => vec![
            Stage::BuildRefdb,
            Stage::Pretrain,
            Stage::Finetune,
            Stage::Index,
            Stage::Localize,
            Stage::Evaluate,
        ],
    };
    let mut pipeline = Pipeline::new(config);
    pipeline.force = cli.force;
    for stage in stages {
        match pipeline.run(stage)? {
            Outcome::UpToDate => println!("{}: up to date", stage.name()),
            Outcome::Ran { seconds } => println!("{}: done ({seconds:.1} s)", stage.name()),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
