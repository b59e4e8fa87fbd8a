//! `embspace`: runs the toy embedding-space experiments and writes CSV/JSON
//! results plus a manifest that can repeat the run.

mod commands;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use run::Common;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] embspace::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Parser, Debug)]
#[command(name = "embspace", version, about = "Embedding-space experiments on a toy dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic dataset as a tensor plus labels.
    GenData(Common),
    /// Fresh model parameters.
    InitModel(Common),
    /// Contrastive training on the train split.
    Train(Common),
    /// Zero-shot confusion matrix on the held-out split.
    ZeroShot(Common),
    /// Match one image toward the `target_class` embedding.
    Match(Common),
    /// Match held-out images toward every other class.
    Systematic(Common),
    /// Jacobian of the image embedding and its spectrum.
    Jacobian(Common),
    /// First-order noise prediction against sampling.
    PredictNoise(Common),
    /// Confusion matrix of noisy copies, one image per class.
    NoisyConfusion(Common),
    /// Flag one image as modified or not.
    Detect(Common),
    /// Detector accuracy over a noise grid on originals and matched images.
    SweepDetect(Common),
    /// 2-D PCA of class means, one image and its match.
    Project(Common),
}

impl Command {
    fn split(&self) -> (&'static str, &Common) {
        match self {
            Command::GenData(c) => ("gen-data", c),
            Command::InitModel(c) => ("init-model", c),
            Command::Train(c) => ("train", c),
            Command::ZeroShot(c) => ("zero-shot", c),
            Command::Match(c) => ("match", c),
            Command::Systematic(c) => ("systematic", c),
            Command::Jacobian(c) => ("jacobian", c),
            Command::PredictNoise(c) => ("predict-noise", c),
            Command::NoisyConfusion(c) => ("noisy-confusion", c),
            Command::Detect(c) => ("detect", c),
            Command::SweepDetect(c) => ("sweep-detect", c),
            Command::Project(c) => ("project", c),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = cli.command.split();
    let result = run::Run::setup(name, common).and_then(|run| commands::dispatch(name, run));
    match result {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) | CliError::Core(embspace::Error::Argument(_)) => ExitCode::from(2),
                CliError::Mismatch(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
