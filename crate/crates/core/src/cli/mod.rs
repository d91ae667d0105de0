//! The `dualscreen` command line.

mod commands;
mod config;
mod draw;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;

pub use self::commands::render_document;
pub use self::config::{
    parse_overrides, CheckpointSection, CropSection, CropSource, DataSection, EvalSection, GenSection, InferSection,
    OutputSection, RunConfig, SplitPart, SplitSection, PRESETS,
};
pub use self::draw::{annotate, caption, class_colour};

#[derive(Debug, Parser)]
#[command(name = "dualscreen", version, about = "Detect objects in cluttered scenes, then screen each one for anomalies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into `data.dir`.
    Gen(RunArgs),
    /// Write a stratified train/validation/test split.
    Split(RunArgs),
    /// Train the object detector.
    TrainDetector(RunArgs),
    /// Train the crop classifier (and the whole-image baseline).
    TrainClassifier(RunArgs),
    /// Evaluate a detector checkpoint or a detections file.
    EvalDetector(RunArgs),
    /// Evaluate detection followed by crop classification.
    EvalPipeline(RunArgs),
    /// Annotate images with detections and anomaly verdicts.
    Infer(RunArgs),
    /// Render the tables of all evaluation reports.
    Report(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML file of dotted `section.key = value` settings.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Settings overriding the file, as `--section.key value` or `--section.key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Gen(a)
            | Command::Split(a)
            | Command::TrainDetector(a)
            | Command::TrainClassifier(a)
            | Command::EvalDetector(a)
            | Command::EvalPipeline(a)
            | Command::Infer(a)
            | Command::Report(a) => a,
        }
    }
}

/// Resolves the configuration and runs one subcommand.
pub fn run(cli: &Cli) -> Result<()> {
    let args = cli.command.args();
    let config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    match cli.command {
        Command::Gen(_) => commands::gen(&config),
        Command::Split(_) => commands::split(&config),
        Command::TrainDetector(_) => commands::train_detector_cmd(&config),
        Command::TrainClassifier(_) => commands::train_classifier_cmd(&config),
        Command::EvalDetector(_) => commands::eval_detector(&config),
        Command::EvalPipeline(_) => commands::eval_pipeline(&config),
        Command::Infer(_) => commands::infer(&config),
        Command::Report(_) => commands::report(&config),
    }
}
