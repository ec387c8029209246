//! Batch front-end: manifests, trials, commands and plots.

pub mod commands;
pub mod manifest;
pub mod plot;
pub mod trial;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::matcher::FilterPolicy;

pub use commands::{cmd_ablate, cmd_evaluate, cmd_refine, cmd_scene, AblationRow, EvaluateArgs, RunReport, RunStatus, RunSummary};
pub use manifest::{RunManifest, TargetAngles};
pub use plot::cmd_plot;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or input files.
    #[error("{0}")]
    Usage(String),
    /// A run failed after starting; partial outputs are kept.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "epirefine", version, about = "Refine generated views until they agree with the target epipolar geometry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene file.
    Scene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = trial::STANDARD_PRIMITIVES)]
        n: usize,
        #[arg(long, default_value_t = trial::STANDARD_DEPTH_RANGE.0)]
        depth_min: f64,
        #[arg(long, default_value_t = trial::STANDARD_DEPTH_RANGE.1)]
        depth_max: f64,
        #[arg(long, default_value = "scene.json")]
        out: PathBuf,
    },
    /// Refine every target pose of a manifest.
    Refine {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, env = "EPIREFINE_JOBS", default_value_t = 1)]
        jobs: usize,
        /// Override the manifest's snapshot interval (0 disables).
        #[arg(long)]
        snapshot_every: Option<usize>,
        /// Override how many fresh latents are tried when matching fails.
        #[arg(long)]
        reseed_attempts: Option<usize>,
    },
    /// Sweep match-filtering policies, thresholds and RGB weights.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = FilterPolicy::ALL)]
        policies: Vec<FilterPolicy>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.15, 0.25])]
        thresholds: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 2.5, 10.0])]
        lambdas: Vec<f64>,
        #[arg(long, env = "EPIREFINE_JOBS", default_value_t = 1)]
        jobs: usize,
        /// Defaults to `ablation.csv` in the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one generated image against a reference and target camera.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference_camera: PathBuf,
        #[arg(long)]
        target_camera: PathBuf,
        /// Scene used to build the warp mask for masked PSNR/SSIM.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Evaluation config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render histogram CSVs or trace JSONs to SVG.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Executes a parsed command and returns the line to print on success.
pub fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::Scene {
            seed,
            n,
            depth_min,
            depth_max,
            out,
        } => cmd_scene(seed, n, (depth_min, depth_max), &out),
        Command::Refine {
            manifest,
            jobs,
            snapshot_every,
            reseed_attempts,
        } => {
            let mut m = RunManifest::load(&manifest)?;
            if let Some(k) = snapshot_every {
                m.refinement.snapshot_every = k;
            }
            if let Some(k) = reseed_attempts {
                m.refinement.reseed_attempts = k;
            }
            let s = cmd_refine(&m, jobs)?;
            Ok(format!("{} runs completed; summary in {}", s.succeeded, m.output_dir.join("summary.json").display()))
        }
        Command::Ablate {
            manifest,
            policies,
            thresholds,
            lambdas,
            jobs,
            out,
        } => {
            let m = RunManifest::load(&manifest)?;
            let out = out.unwrap_or_else(|| m.output_dir.join("ablation.csv"));
            let rows = cmd_ablate(&m, &policies, &thresholds, &lambdas, jobs, &out)?;
            Ok(format!("wrote {} ablation rows to {}", rows.len(), out.display()))
        }
        Command::Evaluate {
            reference,
            generated,
            reference_camera,
            target_camera,
            scene,
            config,
            out,
        } => {
            let args = EvaluateArgs {
                reference,
                generated,
                reference_camera,
                target_camera,
                scene,
                config,
                out_dir: out,
            };
            let r = cmd_evaluate(&args)?;
            Ok(serde_json::to_string(&r).expect("report serializes"))
        }
        Command::Plot { out, inputs } => {
            cmd_plot(&inputs, &out)?;
            Ok(format!("wrote {}", out.display()))
        }
    }
}

/// Entry point of the `epirefine` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
