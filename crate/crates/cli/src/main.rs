//! `stqe`: batch command-line front end for the enhancement pipeline.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stqe::analysis::{Axis, DEFAULT_G};
use stqe::pcdata::{ColorMatrix, ColorMode, Encoding};
use stqe::Component;

#[derive(Parser, Debug)]
#[command(name = "stqe", version, about = "Spatial-temporal attribute enhancement for compressed point clouds")]
struct Cli {
    /// Worker threads; 0 runs everything serially.
    #[arg(long, global = true, env = "STQE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Options applied when reading PLY files.
#[derive(Args, Debug, Clone)]
pub struct ReadArgs {
    /// Average the attributes of repeated coordinates instead of failing.
    #[arg(long)]
    dedup: bool,

    /// RGB <-> YCbCr matrix for 8-bit color files.
    #[arg(long, default_value = "bt709")]
    matrix: ColorMatrix,
}

/// Options applied when writing PLY files.
#[derive(Args, Debug, Clone)]
pub struct WriteArgs {
    /// `ascii` or `binary`.
    #[arg(long, default_value = "binary")]
    encoding: Encoding,

    /// `ycbcr_float` (lossless) or `rgb8`.
    #[arg(long, default_value = "ycbcr_float")]
    color: ColorMode,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project a reference frame's colors onto the current frame's geometry.
    Recolor {
        #[arg(long)]
        current: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the number of reference points mapped to each current point, one per line.
        #[arg(long)]
        provenance: Option<PathBuf>,
        #[command(flatten)]
        read: ReadArgs,
        #[command(flatten)]
        write: WriteArgs,
    },

    /// Enhance every frame of a sequence with one or more trained models.
    Enhance {
        /// Checkpoint; repeat to enhance several components (one model each).
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Directory whose `*.ply` files, sorted by name, form the sequence.
        #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
        input: Option<PathBuf>,
        /// Explicit frame list, in temporal order.
        #[arg(long, num_args = 1..)]
        frames: Vec<PathBuf>,
        /// Require the (single) model to be trained for this component.
        #[arg(long)]
        component: Option<Component>,
        /// Output directory; frames keep their file names.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        patch_size: usize,
        #[command(flatten)]
        read: ReadArgs,
        #[command(flatten)]
        write: WriteArgs,
    },

    /// Train a model for one component from a manifest of samples.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON training configuration; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log (effective config and per-epoch losses); defaults to `<out>.json`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        overrides: commands::TrainOverrides,
        #[command(flatten)]
        read: ReadArgs,
    },

    /// PSNR, delta-PSNR and BD-rate of enhanced frames against the codec anchor.
    Eval {
        /// Directory with one subdirectory of frames per rate label.
        #[arg(long)]
        enhanced: PathBuf,
        /// Directory with one subdirectory of frames per rate label.
        #[arg(long)]
        anchor: PathBuf,
        /// Directory with the uncompressed frames.
        #[arg(long)]
        original: PathBuf,
        /// `{"rates": [{"label": ..., "bpip": ...}, ...]}`.
        #[arg(long)]
        rates: PathBuf,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        read: ReadArgs,
    },

    /// Luma-difference versus axis-offset study with a Gaussian fit per axis.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        /// Neighbours per sampled point.
        #[arg(long, default_value_t = DEFAULT_G)]
        g: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "x,y,z")]
        axes: Vec<Axis>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        read: ReadArgs,
    },

    /// Compare the k-d tree search with a brute-force scan on a cloud.
    KnnCheck {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Check only the first N points as queries.
        #[arg(long)]
        max_queries: Option<usize>,
        #[command(flatten)]
        read: ReadArgs,
    },

    /// Print the header and tensor table of a checkpoint.
    DescribeCheckpoint {
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let parallel = io::configure_threads(cli.threads)?;
    match cli.command {
        Command::Recolor { current, reference, out, provenance, read, write } => {
            commands::recolor(&current, &reference, &out, provenance.as_deref(), &read, &write)?
        }
        Command::Enhance { models, input, frames, component, out, patch_size, read, write } => {
            let frames = match input {
                Some(dir) => io::list_ply(&dir)?,
                None => frames,
            };
            commands::enhance(&models, &frames, component, &out, patch_size, &read, &write, parallel)?
        }
        Command::Train { manifest, config, init, out, log, overrides, read } => {
            commands::train(&manifest, config.as_deref(), init.as_deref(), &out, log.as_deref(), &overrides, &read, parallel)?
        }
        Command::Eval { enhanced, anchor, original, rates, out, read } => {
            commands::eval(&enhanced, &anchor, &original, &rates, out.as_deref(), &read, parallel)?
        }
        Command::Analyze { input, g, runs, seed, axes, out, read } => {
            commands::analyze(&input, g, runs, seed, &axes, out.as_deref(), &read)?
        }
        Command::KnnCheck { input, k, max_queries, read } => {
            if !commands::knn_check(&input, k, max_queries, &read)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DescribeCheckpoint { model } => commands::describe_checkpoint(&model)?,
    }
    Ok(ExitCode::SUCCESS)
}
