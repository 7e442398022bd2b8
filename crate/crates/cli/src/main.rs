//! `nanosyn`: train, run, and evaluate the mask-to-micrograph synthesis
//! pipeline. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nanosyn_cli::commands::{
    cmd_ablate, cmd_evaluate, cmd_generate, cmd_make_masks, cmd_segment, cmd_train, AblateArgs,
    EvaluateArgs, GenerateArgs, MakeMasksArgs, SegmentArgs, TrainArgs,
};
use nanosyn_cli::CliError;

#[derive(Parser)]
#[command(
    name = "nanosyn",
    about = "Synthesize nanoparticle micrographs from binary masks and segment them back"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Mask-synthesis knobs shared by `generate --synthesize` and `make-masks`.
#[derive(Args)]
struct SynthesisFlags {
    /// Minimum particles per mask
    #[arg(long, default_value_t = 3)]
    min_count: usize,
    /// Maximum particles per mask
    #[arg(long, default_value_t = 8)]
    max_count: usize,
    /// Minimum particle radius in pixels
    #[arg(long, default_value_t = 4.0)]
    min_radius: f64,
    /// Maximum particle radius in pixels
    #[arg(long, default_value_t = 12.0)]
    max_radius: f64,
    /// Minimum ellipticity (0 = circle)
    #[arg(long, default_value_t = 0.0)]
    min_ellipticity: f64,
    /// Maximum ellipticity
    #[arg(long, default_value_t = 0.4)]
    max_ellipticity: f64,
    /// Allow particles to overlap
    #[arg(long)]
    overlap: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generator, segmenter, and discriminators
    Train {
        /// TOML run configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints, logs, and the run manifest
        #[arg(long)]
        out_dir: PathBuf,
        /// Dataset root (images/ and masks/), or toy:<n>
        #[arg(long)]
        data_root: Option<String>,
        /// Training seed override
        #[arg(long)]
        seed: Option<u64>,
        /// Epoch count override
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate micrographs from masks using a trained checkpoint
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Directory of binary mask rasters
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Synthesize this many masks instead of reading --masks
        #[arg(long)]
        synthesize: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        synthesis: SynthesisFlags,
        /// Post-process: additive brightness shift in [-1, 1]
        #[arg(long, default_value_t = 0.0)]
        brightness_shift: f64,
        /// Post-process: multiplicative exposure gain (> 0)
        #[arg(long, default_value_t = 1.0)]
        exposure_gain: f64,
        /// Post-process: lift dark regions, strength in [0, 1]
        #[arg(long, default_value_t = 0.0)]
        shadow_lift: f64,
        /// Post-process: compress bright regions, strength in [0, 1]
        #[arg(long, default_value_t = 0.0)]
        highlight_cut: f64,
    },
    /// Segment micrographs into binary masks using a trained checkpoint
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of grayscale images
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Foreground probability threshold
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score generated images against the held-out test split (FID, SSIM)
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        data_root: Option<String>,
        /// Score real test images against themselves (metric self-check)
        #[arg(long)]
        identity_stub: bool,
    },
    /// Train and score one model per segmentation-loss configuration
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        data_root: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Synthesize binary particle masks without a model
    MakeMasks {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        count: usize,
        /// Mask side length in pixels
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[command(flatten)]
        synthesis: SynthesisFlags,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            out_dir,
            data_root,
            seed,
            epochs,
        } => cmd_train(&TrainArgs {
            config,
            out_dir,
            data_root,
            seed,
            epochs,
        }),
        Command::Generate {
            checkpoint,
            out_dir,
            masks,
            synthesize,
            seed,
            synthesis,
            brightness_shift,
            exposure_gain,
            shadow_lift,
            highlight_cut,
        } => cmd_generate(&GenerateArgs {
            checkpoint,
            out_dir,
            masks,
            synthesize,
            seed,
            particle_count: (synthesis.min_count, synthesis.max_count),
            radius: (synthesis.min_radius, synthesis.max_radius),
            ellipticity: (synthesis.min_ellipticity, synthesis.max_ellipticity),
            overlap: synthesis.overlap,
            brightness_shift,
            exposure_gain,
            shadow_lift,
            highlight_cut,
        }),
        Command::Segment {
            checkpoint,
            images,
            out_dir,
            threshold,
        } => cmd_segment(&SegmentArgs {
            checkpoint,
            images,
            out_dir,
            threshold,
        }),
        Command::Evaluate {
            config,
            checkpoint,
            out_dir,
            data_root,
            identity_stub,
        } => cmd_evaluate(&EvaluateArgs {
            config,
            checkpoint,
            out_dir,
            data_root,
            identity_stub,
        }),
        Command::Ablate {
            config,
            out_dir,
            data_root,
            seed,
            epochs,
        } => cmd_ablate(&AblateArgs {
            config,
            out_dir,
            data_root,
            seed,
            epochs,
        }),
        Command::MakeMasks {
            out_dir,
            count,
            size,
            synthesis,
            seed,
        } => cmd_make_masks(&MakeMasksArgs {
            out_dir,
            count,
            size,
            particle_count: (synthesis.min_count, synthesis.max_count),
            radius: (synthesis.min_radius, synthesis.max_radius),
            ellipticity: (synthesis.min_ellipticity, synthesis.max_ellipticity),
            overlap: synthesis.overlap,
            seed,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
