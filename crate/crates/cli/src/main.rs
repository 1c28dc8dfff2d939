//! `nfsm`: synthetic-workflow phase recognition pipeline.

mod commands;
mod config;
mod plot;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "nfsm",
    about = "Transition-aware temporal phase recognition on synthetic workflow data",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a synthetic dataset and write videos plus a manifest.
    GenData {
        /// Workflow spec file; omit for the built-in synth-7 benchmark spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_videos: usize,
        /// Base seed; video i uses seed + i.
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        /// Hard cap on frames per video.
        #[arg(long, default_value_t = 400)]
        max_frames: usize,
    },
    /// Two-stage training from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Predict a dataset and compute the metric suite.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// online or offline.
        #[arg(long, default_value = "online")]
        mode: String,
        /// A (baseline), B (transition-aware), or C (full).
        #[arg(long, default_value = "C")]
        source: String,
        /// concat or per_video averaging.
        #[arg(long, default_value = "concat")]
        regime: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Predict a dataset and write only the prediction file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "online")]
        mode: String,
        #[arg(long, default_value = "C")]
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render timeline ribbons (ground truth plus each prediction file).
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// Prediction files over the same videos.
        files: Vec<PathBuf>,
    },
    /// Run the A/B/C x finetune/freeze ladder and summarize.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData {
            spec,
            out,
            n_videos,
            seed,
            max_frames,
        } => commands::cmd_gen_data(spec.as_deref(), out, *n_videos, *seed, *max_frames),
        Cmd::Train { config } => commands::cmd_train(config),
        Cmd::Eval {
            ckpt,
            data,
            mode,
            source,
            regime,
            out_dir,
        } => commands::cmd_eval(ckpt, data, mode, source, regime, out_dir),
        Cmd::Infer {
            ckpt,
            data,
            mode,
            source,
            out,
        } => commands::cmd_infer(ckpt, data, mode, source, out),
        Cmd::Plot { out, files } => commands::cmd_plot(files, out),
        Cmd::Ablate { config } => commands::cmd_ablate(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nfsm: error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
