use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hypergen::experiments::{self, RunConfig, Scale};
use hypergen::hypernet::GenerationMode;
use hypergen::Error;

#[derive(Parser)]
#[command(
    name = "hypergen",
    version,
    about = "Train hypernetworks for the L1 task and analyse what they generate"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = ScaleArg::Desk)]
    scale: ScaleArg,
    /// Training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    beta_min: Option<f64>,
    #[arg(long, global = true)]
    beta_max: Option<f64>,
    #[arg(long, global = true)]
    beta_steps: Option<usize>,
    /// Worker threads for evaluation fan-out.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Fail instead of moving existing outputs aside.
    #[arg(long, global = true)]
    no_clobber: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Train the hyperhypernetwork, resuming from the latest checkpoint.
    Train,
    /// Evaluate the β frontier with and without the encoder.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate the β frontier with decoder-only generation.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Classify generated networks over checkpoints and β.
    Phases,
    /// Decoder-only losses over a grid of target sizes.
    Generalize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the target network directly with Adam and draw it.
    Baseline,
    /// Draw a network from a weights JSON file.
    Draw { weights: PathBuf },
    /// Calibrate the algorithm classifier on reference networks.
    Calibrate,
}

fn load_config(c: &Common) -> hypergen::Result<RunConfig> {
    let scale = match c.scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    };
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path, scale)?,
        None => RunConfig::preset(scale),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
        cfg.baseline.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(b) = c.beta_min {
        cfg.beta_min = b;
    }
    if let Some(b) = c.beta_max {
        cfg.beta_max = b;
    }
    if let Some(n) = c.beta_steps {
        cfg.beta_steps = n;
    }
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    if c.no_clobber {
        cfg.overwrite = experiments::OverwritePolicy::Refuse;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn print<S: Serialize>(value: &S) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: &Cli) -> hypergen::Result<()> {
    let cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::Train => print(&experiments::cmd_train(&cfg)?),
        Command::Sweep { checkpoint } => print(&experiments::cmd_sweep(
            &cfg,
            checkpoint.as_deref(),
            &[GenerationMode::WithEncoder, GenerationMode::DecoderOnly],
            "sweep",
        )?),
        Command::Ablate { checkpoint } => print(&experiments::cmd_sweep(
            &cfg,
            checkpoint.as_deref(),
            &[GenerationMode::DecoderOnly],
            "ablate",
        )?),
        Command::Phases => print(&experiments::cmd_phases(&cfg)?),
        Command::Generalize { checkpoint } => {
            let s = experiments::cmd_generalize(&cfg, checkpoint.as_deref())?;
            print(&serde_json::json!({
                "stamp": s.stamp,
                "step": s.step,
                "encoder_independent": s.encoder_independent,
                "cells": s.cells.len(),
                "training_cell_loss": s.training_cell_loss,
                "loss_p25": s.loss_p25,
                "contour_levels": s.contour_levels,
            }));
        }
        Command::Baseline => print(&experiments::cmd_baseline(&cfg)?),
        Command::Draw { weights } => print(&experiments::cmd_draw(&cfg, weights)?),
        Command::Calibrate => print(&experiments::cmd_calibrate(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
