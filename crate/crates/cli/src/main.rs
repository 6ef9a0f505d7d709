use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use waterbird_cli::commands;
use waterbird_cli::{CliError, Overrides, PipelineConfig};

/// Aerial waterbird survey pipeline: tiling, dataset preparation,
/// detection merging, counting and evaluation.
#[derive(Debug, Parser)]
#[command(name = "waterbird", version)]
struct Cli {
    /// Pipeline config (TOML). Flags override values from the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut survey images into overlapping tiles and write the tiles manifest.
    Tile {
        /// Input rasters (replaces the config's image list).
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Annotation CSV.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Taxonomy TOML.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Split tiles into train/validation/test manifests.
    Split {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Keep all tiles of a source image in one subset.
        #[arg(long)]
        split_by_image: bool,
    },
    /// Oversample minority-dominated training tiles.
    Augment {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        tiles_dir: Option<PathBuf>,
    },
    /// Emit detections from the seeded perturbation oracle.
    DetectOracle {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Back-project, de-duplicate and count detections.
    MergeCount {
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Interpolated AP, mAP and confusion matrix against tile annotations.
    Evaluate {
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Draw merged detections onto a source image.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
    };
    let mut cfg = PipelineConfig::resolve(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Tile {
            images,
            annotations,
            taxonomy,
        } => {
            if !images.is_empty() {
                cfg.images = images;
            }
            cfg.annotations = annotations.or(cfg.annotations);
            cfg.taxonomy = taxonomy.or(cfg.taxonomy);
            commands::cmd_tile(&cfg)
        }
        Command::Split {
            manifest,
            split_by_image,
        } => {
            cfg.split.by_image |= split_by_image;
            commands::cmd_split(&cfg, manifest.as_deref())
        }
        Command::Augment { manifest, tiles_dir } => {
            commands::cmd_augment(&cfg, manifest.as_deref(), tiles_dir.as_deref())
        }
        Command::DetectOracle { manifest } => commands::cmd_detect_oracle(&cfg, manifest.as_deref()),
        Command::MergeCount { detections, manifest } => {
            commands::cmd_merge_count(&cfg, detections.as_deref(), manifest.as_deref())
        }
        Command::Evaluate { detections, manifest } => {
            commands::cmd_evaluate(&cfg, detections.as_deref(), manifest.as_deref())
        }
        Command::Render {
            image,
            detections,
            output,
        } => commands::cmd_render(&cfg, &image, detections.as_deref(), output.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
