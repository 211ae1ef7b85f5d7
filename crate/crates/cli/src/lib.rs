//! `dirsurf`: reconstruct implicit surfaces from synthetic multi-view data
//! and compare directional parameterizations of the radiance field.
//!
//! Subcommands: generate, train, render, extract, eval, ablate, diagnose,
//! version. Exit codes: 0 success, 2 configuration/usage error, 3 numeric
//! abort, 4 I/O error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dirsurf_core::dirparam::{DirMode, FusionPoint};
use dirsurf_core::{Error, Result};

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

#[derive(Debug, Parser)]
#[command(name = "dirsurf", version, disable_version_flag = true)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Render a synthetic multi-view dataset for a built-in scene.
    Generate(RunArgs),
    /// Fit the SDF + radiance field to a dataset.
    Train(TrainArgs),
    /// Render held-out views from a trained run.
    Render(RunRefArgs),
    /// Extract the zero level set (2D contour / 3D mesh) from a trained run.
    Extract(RunRefArgs),
    /// Extract, score against the analytic scene, and render held-out views.
    Eval(RunRefArgs),
    /// Sweep one directional-parameterization axis and tabulate the results.
    Ablate(AblateArgs),
    /// Reflection-direction dispersion diagnostic on an analytic scene.
    Diagnose(DiagnoseArgs),
    /// Print the tool version.
    Version,
}

fn parse_fusion(s: &str) -> std::result::Result<FusionPoint, String> {
    match s {
        "pre" | "pre-encoding" | "pre_encoding" => Ok(FusionPoint::PreEncoding),
        "post" | "post-encoding" | "post_encoding" => Ok(FusionPoint::PostEncoding),
        other => Err(format!("unknown fusion order '{other}' (expected pre or post)")),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in scene id.
    #[arg(long)]
    pub scene: Option<String>,
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory for this run.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed for all random streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directional input of the radiance network.
    #[arg(long)]
    pub mode: Option<DirMode>,
    /// Initial value of the blend parameter gamma_b (hybrid mode).
    #[arg(long = "gamma-b-init")]
    pub gamma_b_init: Option<f64>,
    /// Detach |f| inside the blend weight (true) or let gradients flow (false).
    #[arg(long)]
    pub detach: Option<bool>,
    /// Blend directions before or after positional encoding.
    #[arg(long = "fusion-order", value_parser = parse_fusion)]
    pub fusion: Option<FusionPoint>,
    /// Training iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Worker threads for the gradient pass (1 = deterministic reference).
    #[arg(long)]
    pub workers: Option<usize>,
}

impl RunArgs {
    pub fn overrides(&self) -> config::Overrides {
        config::Overrides {
            scene: self.scene.clone(),
            dataset: self.dataset.clone(),
            out_dir: self.out.clone(),
            seed: self.seed,
            mode: self.mode,
            gamma_b_init: self.gamma_b_init,
            detach_blend: self.detach,
            fusion: self.fusion,
            iterations: self.iterations,
            workers: self.workers,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunRefArgs {
    /// Directory of a trained run (holds checkpoint.bin and
    /// config.resolved.json).
    #[arg(long)]
    pub run: PathBuf,
    /// Configuration to use instead of the run's resolved one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory override.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory (defaults to the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extraction grid cells per axis.
    #[arg(long = "grid-resolution")]
    pub grid_resolution: Option<usize>,
    /// Number of held-out views to render.
    #[arg(long)]
    pub heldout: Option<usize>,
}

impl RunRefArgs {
    pub fn run_overrides(&self) -> config::Overrides {
        config::Overrides {
            dataset: self.dataset.clone(),
            out_dir: self.out.clone(),
            ..config::Overrides::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    GammaBInit,
    Detach,
    FusionOrder,
    Mode,
}

impl AblateAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblateAxis::GammaBInit => "gamma-b-init",
            AblateAxis::Detach => "detach",
            AblateAxis::FusionOrder => "fusion-order",
            AblateAxis::Mode => "mode",
        }
    }
}

impl std::str::FromStr for AblateAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<AblateAxis> {
        match s {
            "gamma-b-init" => Ok(AblateAxis::GammaBInit),
            "detach" => Ok(AblateAxis::Detach),
            "fusion-order" => Ok(AblateAxis::FusionOrder),
            "mode" => Ok(AblateAxis::Mode),
            other => Err(Error::Usage(format!(
                "unknown ablation axis '{other}' (expected gamma-b-init, detach, fusion-order, or mode)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Which knob to sweep: gamma-b-init, detach, fusion-order, or mode.
    #[arg(long)]
    pub axis: AblateAxis,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DiagnoseArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in scene id.
    #[arg(long)]
    pub scene: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rays in the diagnostic fan.
    #[arg(long, default_value_t = 32)]
    pub rays: usize,
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Generate(a) => commands::generate(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Render(a) => commands::render(a),
        Cmd::Extract(a) => commands::extract(a),
        Cmd::Eval(a) => commands::evaluate(a),
        Cmd::Ablate(a) => commands::ablate(a),
        Cmd::Diagnose(a) => commands::diagnose(a),
        Cmd::Version => {
            commands::version();
            Ok(())
        }
    }
}

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Dimension(_) | Error::Format(_) => 2,
        Error::Domain(_) | Error::Numeric(_) => 3,
        Error::Io(_) => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_the_error_space() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Usage("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::other("x"))),
            4
        );
    }

    #[test]
    fn cli_parses_the_paper_flag_spelling() {
        let cli = Cli::try_parse_from([
            "dirsurf", "train", "--dataset", "d", "--mode", "hybrid", "--gamma-b-init", "0.3",
        ])
        .unwrap();
        match cli.cmd {
            Cmd::Train(t) => {
                assert_eq!(t.run.mode, Some(DirMode::Hybrid));
                assert_eq!(t.run.gamma_b_init, Some(0.3));
                assert!(!t.resume);
            }
            _ => panic!("parsed the wrong subcommand"),
        }
    }

    #[test]
    fn fusion_order_accepts_short_names() {
        assert_eq!(parse_fusion("pre").unwrap(), FusionPoint::PreEncoding);
        assert_eq!(parse_fusion("post").unwrap(), FusionPoint::PostEncoding);
        assert!(parse_fusion("sideways").is_err());
    }
}
