//! `tetradiff`: grid construction, baking, training, sampling and
//! evaluation from the command line.
//!
//! stdout carries machine-readable JSON only; logs go to stderr. Failures
//! print `{"error": kind, "code": n, "message": ...}` on stderr and exit
//! with 1 (usage), 2 (validation) or 3 (runtime).

mod commands;
mod error;

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tetradiff", version, about = "Diffusion models on deformable tetrahedral grids")]
pub struct Cli {
    /// Worker threads; 1 forces fully sequential execution.
    #[arg(long, global = true)]
    threads: Option<NonZeroUsize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or inspect multi-resolution tetrahedral grids.
    #[command(subcommand)]
    Grid(GridCommand),
    /// Bake meshes into a dataset of per-vertex fields.
    Bake(BakeArgs),
    /// Train a denoiser on a baked dataset.
    Train(TrainArgs),
    /// Draw samples from a trained checkpoint.
    Sample(SampleArgs),
    /// Sample along a slerp path between two noise seeds.
    Interpolate(InterpolateArgs),
    /// 1-NNA between generated and reference mesh sets.
    Metrics(MetricsArgs),
    /// Extract a dataset shape as a mesh, or convert between mesh formats.
    Export(ExportArgs),
}

#[derive(Debug, Subcommand)]
pub enum GridCommand {
    Build {
        #[arg(long)]
        cells: NonZeroUsize,
        #[arg(long)]
        levels: NonZeroUsize,
        #[arg(long)]
        out: PathBuf,
    },
    Info { file: PathBuf },
}

#[derive(Debug, Args)]
pub struct BakeArgs {
    /// Mesh files or directories of .obj/.ply files; repeatable.
    #[arg(long, required = true, num_args = 1..)]
    pub mesh: Vec<PathBuf>,
    #[arg(long)]
    pub grid: PathBuf,
    /// Grid level to bake on (default: finest).
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long, default_value_t = tetradiff_core::databake::DEFAULT_POINTS)]
    pub points: usize,
    /// Also bake vertex colors (7 channels).
    #[arg(long)]
    pub color: bool,
    /// Skip rescaling meshes into the grid bounds.
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Optional grid file; must match the dataset's grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// JSON with optional `model`, `train` and `schedule` objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint at `--out` if it exists.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Sample `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated steps whose x̂₀ is exported as `step_{t}.ply`.
    #[arg(long, value_delimiter = ',')]
    pub save_trajectory: Vec<usize>,
    /// `volume:+256`, `volume:-256` or `laplacian:λ`.
    #[arg(long)]
    pub guide: Option<String>,
    /// Inclusive step range `a..b` for guidance (default: every step).
    #[arg(long)]
    pub guide_steps: Option<String>,
    #[arg(long, default_value = "ply")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub seed_a: u64,
    #[arg(long)]
    pub seed_b: u64,
    /// Number of shapes along the path, endpoints included.
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "ply")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value = "cd")]
    pub metric: String,
    #[arg(long, default_value_t = tetradiff_core::metrics::DEFAULT_POINTS)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Dataset directory to extract from.
    #[arg(long, conflicts_with = "mesh", required_unless_present = "mesh")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Mesh to convert.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.get())
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let threads = cli.threads.map(NonZeroUsize::get);
    match cli.command {
        Command::Grid(GridCommand::Build { cells, levels, out }) => commands::grid_build(cells, levels, &out, threads),
        Command::Grid(GridCommand::Info { file }) => commands::grid_info(&file),
        Command::Bake(a) => commands::bake(&a, threads),
        Command::Train(a) => commands::train(&a, threads),
        Command::Sample(a) => commands::sample(&a, threads),
        Command::Interpolate(a) => commands::interpolate(&a, threads),
        Command::Metrics(a) => commands::metrics(&a),
        Command::Export(a) => commands::export(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return CliError::Usage(e.render().to_string().trim().to_string()).report();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
