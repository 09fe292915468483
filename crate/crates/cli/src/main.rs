//! Batch entry points for the sketch-conditioned video colourization
//! pipeline: data generation, VAE training, base training, sketch
//! fine-tuning, inference, evaluation, conditioning-strategy comparison,
//! latent visualization and sketch extraction.
//!
//! Exit codes: 0 success, 1 usage/IO, 2 contract violation, 3 numeric
//! failure.

mod commands;
mod frames;
mod memtrack;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sketchcolour_core::Error;

#[global_allocator]
static ALLOC: memtrack::PeakTracking = memtrack::PeakTracking;

#[derive(Parser)]
#[command(
    name = "sketchcolour",
    about = "Sketch-conditioned video colourization pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset: toy (default) or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Dotted-path config overrides, e.g. --set train.steps=500.
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    /// Cache root for corpus/checkpoints (default: $SKETCHCOLOUR_CACHE or
    /// ./sketchcolour-cache).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overwrite an existing corpus generated under a different config.
        #[arg(long)]
        force: bool,
    },
    /// Train the video VAE on the train split.
    TrainVae {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the two-stream (reference-conditioned) base diffusion model.
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Expand the base with a zero-init sketch stream and fine-tune adapters.
    FinetuneSketch {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Base checkpoint (default: <cache>/checkpoints/base_a.ckpt).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Colourize a sketch sequence from a coloured reference frame.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Sketch-capable checkpoint (default: <cache>/checkpoints/sketch_b.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Coloured reference frame (PNG).
        #[arg(long)]
        reference: PathBuf,
        /// Directory of sketch frames (PNG).
        #[arg(long)]
        sketches: PathBuf,
        /// Output frame directory.
        #[arg(long)]
        out: PathBuf,
        /// Sampler seed (recorded in the sidecar).
        #[arg(long)]
        seed: Option<u64>,
        /// Also write an animated GIF next to the frames.
        #[arg(long)]
        gif: bool,
    },
    /// Evaluate a prediction root against a ground-truth root.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Root of predicted clip directories.
        #[arg(long)]
        pred: PathBuf,
        /// Root of ground-truth clip directories.
        #[arg(long)]
        gt: PathBuf,
        /// Write the JSON report here (default: stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Precomputed external features for predictions (JSON: id → vector).
        #[arg(long)]
        features_pred: Option<PathBuf>,
        /// Precomputed external features for ground truth.
        #[arg(long)]
        features_gt: Option<PathBuf>,
    },
    /// Fine-tune both conditioning variants from one base and compare them.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Output directory for the comparison report and loss curves.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export PCA visualizations of colour- and sketch-clip latents.
    VizLatents {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// VAE checkpoint (default: <cache>/checkpoints/vae.ckpt).
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Clip directory (PNG frames).
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract binary line art from a directory of coloured frames.
    Sketch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Json(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version are not failures
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData { cfg, force } => commands::gen_data(&cfg, force),
        Command::TrainVae { cfg } => commands::train_vae(&cfg),
        Command::TrainBase { cfg } => commands::train_base(&cfg),
        Command::FinetuneSketch { cfg, base } => commands::finetune_sketch(&cfg, base.as_deref()),
        Command::Infer { cfg, checkpoint, reference, sketches, out, seed, gif } => {
            commands::infer(&cfg, checkpoint.as_deref(), &reference, &sketches, &out, seed, gif)
        }
        Command::Eval { cfg, pred, gt, out, features_pred, features_gt } => commands::eval(
            &cfg,
            &pred,
            &gt,
            out.as_deref(),
            features_pred.as_deref(),
            features_gt.as_deref(),
        ),
        Command::Compare { cfg, base, out } => commands::compare(&cfg, base.as_deref(), out.as_deref()),
        Command::VizLatents { cfg, vae, clip, out } => {
            commands::viz_latents(&cfg, vae.as_deref(), &clip, &out)
        }
        Command::Sketch { cfg, input, output } => commands::sketch(&cfg, &input, &output),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
