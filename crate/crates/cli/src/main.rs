mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moundcount::raster::EdgePolicy;

/// Tiled mound detection with block-level count correction.
#[derive(Debug, Parser)]
#[command(name = "moundcount", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Unset flags fall back to `--config`,
/// then to the built-in defaults.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Patch side in pixels [default: 416].
    #[arg(long, global = true)]
    pub patch_size: Option<u32>,
    /// Minimum detection confidence [default: 0.25].
    #[arg(long, global = true)]
    pub conf_threshold: Option<f64>,
    /// Ridge shrinkage [default: 10].
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// IoU threshold for matching detections to labels [default: 0.5].
    #[arg(long, global = true)]
    pub iou: Option<f64>,
    /// pad, partial or drop [default: partial].
    #[arg(long, global = true)]
    pub edge_policy: Option<EdgePolicy>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset manifest CSV.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Fit an unpenalized intercept in the count corrector.
    #[arg(long, global = true)]
    pub intercept: bool,
    /// Standardize features before fitting the corrector.
    #[arg(long, global = true)]
    pub standardize: bool,
    /// Treat a missing detection file as an error.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    /// Detection files listed in the manifest.
    File,
    /// Synthetic detector driven by the manifest's label files.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Kfold,
    Loocv,
    TableCheck,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// Probability that a visible mound is not detected.
    #[arg(long)]
    pub miss_rate: Option<f64>,
    /// Mean false positives per patch.
    #[arg(long)]
    pub fp_rate: Option<f64>,
    /// Standard deviation of the detection center jitter, pixels.
    #[arg(long)]
    pub jitter: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fleet: sidecars, labels, fine-tuning samples,
    /// oracle detections and a manifest.
    Simulate {
        /// Number of blocks.
        #[arg(long, default_value_t = 18)]
        n: usize,
        #[arg(long)]
        area_min: Option<f64>,
        #[arg(long)]
        area_max: Option<f64>,
        #[arg(long)]
        invisible_min: Option<f64>,
        #[arg(long)]
        invisible_max: Option<f64>,
        /// Do not force the two small blocks into the fleet.
        #[arg(long)]
        no_small_blocks: bool,
        #[command(flatten)]
        oracle: OracleArgs,
    },
    /// List the patch grid of a mosaic.
    Tile {
        /// Sidecar JSON of the mosaic.
        #[arg(long, conflicts_with_all = ["width", "height"])]
        sidecar: Option<PathBuf>,
        #[arg(long, requires = "height")]
        width: Option<u32>,
        #[arg(long, requires = "width")]
        height: Option<u32>,
    },
    /// Write the originals plus one augmented copy per box.
    Augment {
        /// Directory of normalized label files.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        sidecar: PathBuf,
        #[arg(long)]
        boxes_per_source: Option<usize>,
    },
    /// Run a detector backend over every manifest block.
    Detect {
        #[arg(long, value_enum, default_value_t = Backend::File)]
        backend: Backend,
        #[command(flatten)]
        oracle: OracleArgs,
    },
    /// Extract block feature vectors from the manifest.
    Features,
    /// Fit the count corrector on a feature CSV with gt_count.
    TrainGlobal {
        #[arg(long)]
        features: PathBuf,
    },
    /// Apply a trained corrector to manifest blocks or a feature CSV.
    Count {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "manifest")]
        features: Option<PathBuf>,
    },
    /// Evaluation protocols.
    Evaluate {
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Folds for kfold [default: one per block].
        #[arg(long)]
        k: Option<usize>,
        /// Feature CSV used instead of the manifest.
        #[arg(long, conflicts_with = "manifest")]
        features: Option<PathBuf>,
        /// Directory holding the three table CSVs [default: built-in copies].
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Hold every cell to the base tolerance even when printed coarser.
        #[arg(long)]
        exact_tolerance: bool,
        /// Exit with status 2 when a table cell does not reproduce.
        #[arg(long)]
        fail_on_mismatch: bool,
    },
}

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_DATA: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_env("RUST_LOG").init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
