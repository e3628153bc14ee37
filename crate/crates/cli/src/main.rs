//! `polypart`: evaluation, artifact analyses, pseudo-label fusion and toy
//! detector runs from the command line.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 input or configuration
//! error, 3 empty input, 4 frame-id mismatch, 5 numerical divergence.

mod error;
mod manifest;
mod reports;
mod toy;

use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use polypart_core::MatchMode;
use serde::Serialize;

use error::{exit, CliError, CliResult};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "polypart", version, about = "Artifact-aware polyp detection analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Precision, recall, F1 and F2 under the centroid criterion.
    Eval(reports::EvalArgs),
    /// Artifact presence, overlap, containment or correlation tables.
    Analyze(reports::AnalyzeArgs),
    /// Promote artifact detections to pseudo-labels on a polyp dataset.
    MergeLabels(reports::MergeArgs),
    /// Export synthetic scenes as a dataset.
    GenScenes(toy::GenArgs),
    /// Train the toy detector.
    TrainToy(toy::TrainArgs),
    /// Run a trained toy detector over synthetic scenes.
    PredictToy(toy::PredictArgs),
    /// Compare analytic and finite-difference gradients of the toy loss.
    Gradcheck(toy::GradArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Strict,
    Analysis,
}

impl From<Mode> for MatchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Strict => MatchMode::Strict,
            Mode::Analysis => MatchMode::Analysis,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Md,
    Csv,
}

/// Writes `text` to `out` with a sidecar manifest, or to stdout with the
/// manifest on stderr.
pub fn emit(text: &str, out: Option<&Path>, m: &mut RunManifest) -> CliResult<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text)
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            m.output(path);
            m.write(&manifest::sidecar(path))
        }
        None => {
            print!("{text}");
            eprint!("{}", m.to_json());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Eval(a) => reports::eval(&a)?,
        Command::Analyze(a) => reports::analyze(&a)?,
        Command::MergeLabels(a) => reports::merge(&a)?,
        Command::GenScenes(a) => toy::gen_scenes(&a)?,
        Command::TrainToy(a) => toy::train_toy(&a)?,
        Command::PredictToy(a) => toy::predict_toy(&a)?,
        Command::Gradcheck(a) => {
            if !toy::gradcheck(&a)? {
                return Ok(exit::CHECK_FAILED);
            }
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::INPUT } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
