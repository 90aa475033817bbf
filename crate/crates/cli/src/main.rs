//! Command-line front end: simulate, track, train the association encoder,
//! augment, evaluate, or run a whole round.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvanon_core::metrics::EvalLevel;

#[derive(Parser)]
#[command(
    name = "mvanon",
    version,
    about = "Multi-view detection recovery for anonymization"
)]
struct Cli {
    /// Worker threads; 1 gives bitwise reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera scene.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track every camera of a detection stream.
    Track {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cross-view association encoder.
    TrainAssoc {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        tracklets: PathBuf,
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint up to the configured epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve boxes across views and write augmented detections and
    /// pseudo labels into a directory.
    Augment {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        tracklets: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// whole_body, face or eye
        #[arg(long)]
        level: Option<EvalLevel>,
        #[arg(long)]
        iou: Option<f64>,
        /// Defaults to cameras.json next to the ground truth.
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip holistic recall, which needs identity labels.
        #[arg(long)]
        no_holistic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track, train, augment and emit pseudo labels into out/round_k.
    RunRound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Use this encoder instead of training.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print format versions.
    Version,
}

fn run(cli: Cli) -> mvanon_core::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(mvanon_core::Error::input("--threads must be at least 1"));
        }
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match &cli.command {
        Command::Simulate { config, seed, out } => {
            commands::simulate_cmd(config.as_deref(), *seed, out)
        }
        Command::Track {
            input,
            cameras,
            config,
            out,
        } => commands::track_cmd(input, cameras.as_deref(), config.as_deref(), out),
        Command::TrainAssoc {
            detections,
            tracklets,
            cameras,
            config,
            resume,
            out,
        } => commands::train_cmd(
            detections,
            tracklets,
            cameras.as_deref(),
            config.as_deref(),
            resume.as_deref(),
            out,
        ),
        Command::Augment {
            detections,
            tracklets,
            ckpt,
            cameras,
            config,
            out,
        } => commands::augment_cmd(
            detections,
            tracklets,
            ckpt,
            cameras.as_deref(),
            config.as_deref(),
            out,
        ),
        Command::Eval {
            pred,
            gt,
            level,
            iou,
            cameras,
            config,
            no_holistic,
            out,
        } => commands::eval_cmd(&commands::EvalArgs {
            pred,
            gt,
            level: *level,
            iou: *iou,
            cameras: cameras.as_deref(),
            config: config.as_deref(),
            holistic: !no_holistic,
            out,
        }),
        Command::RunRound {
            config,
            detections,
            gt,
            ckpt,
            out,
        } => commands::run_round_cmd(
            config,
            detections.as_deref(),
            gt.as_deref(),
            ckpt.as_deref(),
            out.as_deref(),
        ),
        Command::Version => {
            commands::version_cmd();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input() { 2 } else { 1 })
        }
    }
}
