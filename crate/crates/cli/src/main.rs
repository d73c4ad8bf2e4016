//! `svkit`: config-driven speaker-verification pipeline.
//!
//! Exit codes: 0 success, 1 runtime or config failure, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "svkit",
    version,
    about = "Speaker-verification pipeline: synthetic corpora, training, scoring, metrics"
)]
struct Cli {
    /// Run configuration (TOML). Missing file falls back to built-in
    /// desk-scale defaults.
    #[arg(long, global = true, default_value = "svkit.toml")]
    config: PathBuf,

    /// Override a config key, e.g. --set stage1.max_iters=500
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpora, manifests and trial list.
    Synth,
    /// Produce augmented training copies (reverb, music, noise, babble).
    Augment,
    /// Run a training stage (1 = pre-train, 2 = refine).
    Train {
        #[arg(long)]
        stage: u8,
        /// Data-loading worker threads.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fuse a RepVGG checkpoint into its single-conv inference form.
    Reparam {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output path (defaults to rewriting the input in place).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract embeddings for a manifest into an embedding store.
    Extract {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trial list by cosine similarity of stored embeddings.
    Score {
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit logistic-regression calibration on labeled scores and apply it.
    Calibrate {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Equal-weight fusion of score files over one trial list.
    Fuse {
        #[arg(long)]
        out: PathBuf,
        /// Score files to fuse.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// EER / minDCF / actDCF report for score files.
    Evaluate {
        /// Score files (defaults to <workdir>/scores/raw.txt).
        inputs: Vec<PathBuf>,
        #[arg(long)]
        trials: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    if cli.config.exists() {
        RunConfig::load(&cli.config, &cli.set)
    } else {
        RunConfig::parse("", &cli.set)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Synth => commands::cmd_synth(&load_config(&cli)?),
        Cmd::Augment => commands::cmd_augment(&load_config(&cli)?),
        Cmd::Train { stage, workers } => commands::cmd_train(&load_config(&cli)?, stage, workers),
        Cmd::Reparam { ref ckpt, ref out } => {
            commands::cmd_reparam(&load_config(&cli)?, ckpt.clone(), out.clone())
        }
        Cmd::Extract {
            ref ckpt,
            ref manifest,
            ref out,
        } => commands::cmd_extract(
            &load_config(&cli)?,
            ckpt.clone(),
            manifest.clone(),
            out.clone(),
        ),
        Cmd::Score {
            ref trials,
            ref emb,
            ref out,
        } => commands::cmd_score(&load_config(&cli)?, trials.clone(), emb.clone(), out.clone()),
        Cmd::Calibrate {
            ref scores,
            ref trials,
            ref out,
        } => commands::cmd_calibrate(
            &load_config(&cli)?,
            scores.clone(),
            trials.clone(),
            out.clone(),
        ),
        Cmd::Fuse { ref out, ref inputs } => commands::cmd_fuse(out.clone(), inputs.clone()),
        Cmd::Evaluate {
            ref inputs,
            ref trials,
        } => commands::cmd_evaluate(&load_config(&cli)?, inputs.clone(), trials.clone()),
    }
}

fn main() -> ExitCode {
    // Clap handles usage errors itself with exit code 2.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
