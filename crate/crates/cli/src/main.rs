//! `slidekit` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "slidekit", version, about = "Whole-slide image segmentation workbench")]
pub struct Cli {
    /// JSON file of flag defaults, flat ({"overlap": 32}) or per command
    /// ({"segment": {"overlap": 32}}).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode a PNG/TIFF/JPEG raster and write its tile pyramid.
    BuildPyramid(BuildPyramidArgs),
    /// Segment a slide and write the predicted annotation document.
    Segment(SegmentArgs),
    /// Write the detected tissue mask of a slide's thumbnail.
    Tissue(TissueArgs),
    /// Convert an annotation document between JSON and XML.
    Convert(ConvertArgs),
    /// Rasterize annotation layers to a label PNG at a pyramid level.
    MaskExport(MaskExportArgs),
    /// Compare predicted against ground-truth annotations.
    Metrics(MetricsArgs),
    /// Export training patches and masks for annotated tissue tiles.
    ExportPatches(ExportPatchesArgs),
    /// Generate a synthetic slide with known object outlines.
    MakeSynthetic(MakeSyntheticArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BuildPyramidArgs {
    pub src: PathBuf,
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub tile_size: u32,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    pub pyramid: PathBuf,
    /// Backend config JSON; the builtin segmenter when omitted.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub tile_size: u32,
    #[arg(long, default_value_t = 64)]
    pub overlap: u32,
    #[arg(long, default_value_t = 400)]
    pub min_area: u64,
    #[arg(long, default_value_t = 2.0)]
    pub epsilon: f64,
    /// Tile the whole slide instead of detected tissue.
    #[arg(long)]
    pub full_grid: bool,
    /// Comma-separated layer names, one per foreground class.
    #[arg(long, value_delimiter = ',')]
    pub layer_names: Option<Vec<String>>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output document (.json or .xml); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV file to append a timing row to.
    #[arg(long)]
    pub timing: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TissueArgs {
    pub pyramid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2048)]
    pub thumb_max_dim: u32,
    #[arg(long, default_value_t = 64)]
    pub min_component: u64,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Slide id for XML input that carries none.
    #[arg(long)]
    pub slide_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct MaskExportArgs {
    pub doc: PathBuf,
    pub pyramid: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub level: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated layers to paint; all layers when omitted.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Ground-truth document.
    pub gt: Option<PathBuf>,
    /// Predicted document.
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub pyramid: Option<PathBuf>,
    /// Tab-separated `gt  pred  pyramid` lines, micro-averaged together.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    /// Ground-truth layer; the document's first layer when omitted.
    #[arg(long)]
    pub gt_layer: Option<String>,
    /// Predicted layer; defaults to the ground-truth layer's name when present.
    #[arg(long)]
    pub pred_layer: Option<String>,
    /// `slide` (every pixel) or `tissue` (detected tissue boxes only).
    #[arg(long, default_value = "slide")]
    pub region: String,
    /// Write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportPatchesArgs {
    pub doc: PathBuf,
    pub pyramid: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub patch_size: u32,
    #[arg(long, default_value_t = 0.0)]
    pub background_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    #[arg(long, default_value_t = 4096)]
    pub size: u32,
    #[arg(long, default_value_t = 25)]
    pub blobs: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub tissue_fraction: f64,
    /// Output raster (PNG).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a pyramid directly, without a full-size raster in memory.
    #[arg(long)]
    pub pyramid: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub tile_size: u32,
    /// Ground-truth annotation document.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Inference threads per job; all cores when omitted.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub max_jobs: usize,
    /// Default backend config JSON.
    #[arg(long)]
    pub backend: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cmd = match config::apply_defaults(Cli::command(), &argv) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let matches = match cmd.try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR usage: {first}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ERROR usage: {e}");
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { tracing::Level::INFO } else { tracing::Level::WARN };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &commands::CliError) -> ExitCode {
    eprintln!("ERROR {}: {}", e.code(), e);
    ExitCode::from(if e.is_validation() { 2 } else { 1 })
}
