mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use crate::config::{ConfigError, RunConfig};

fn key_help() -> String {
    let defaults = serde_json::to_value(RunConfig::default()).unwrap_or_default();
    let mut text = String::from(
        "Configuration is a flat list of key=value pairs, read from --config and then from the command \
         line (command-line values win). Unknown keys exit with status 2.\n\nKeys (default):\n",
    );
    for (key, doc) in RunConfig::KEYS {
        text.push_str(&format!("  {key:<20} {doc} ({})\n", defaults[key]));
    }
    text
}

#[derive(Parser, Debug)]
#[command(name = "aad", version, about = "Auditory attention decoding from EEG and speech spectrograms", after_help = key_help())]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Flat key=value configuration file ('#' starts a comment).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// key=value overrides applied after the file.
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Generate a synthetic trial container and manifest.
    Synth,
    /// Turn an EEG CSV and two WAV files into a trial container.
    Preprocess,
    /// Train a model from scratch.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval,
    /// Compare input ablations (and optionally retrained architecture variants).
    Ablate,
    /// Magnitude-prune a checkpoint and fine-tune it.
    Prune,
    /// Summarise an existing run directory.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess => "preprocess",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Prune => "prune",
            Command::Report => "report",
        }
    }
}

fn main() -> ExitCode {
    aad_core::tensor::retain_heap();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cfg = match RunConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli.command, &cfg) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
