mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "stegsplat", version, about = "Hide objects, images and bits inside anchor-based Gaussian splatting scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a container and key on a dataset.
    Train(TrainArgs),
    /// Render views of a container; hidden views need the key.
    Render(RenderArgs),
    /// Recover the hidden bits or hidden views with the key.
    Decode(DecodeArgs),
    /// Check a container's schema and anchor geometry.
    Audit(AuditArgs),
    /// Apply noise or pruning to a container.
    Perturb(PerturbArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides `paths.dataset`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `synthetic.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `paths.dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory; overrides `paths.run_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

/// Where the cameras come from: a dataset manifest or a camera JSON file.
#[derive(Debug, Args)]
struct CameraArgs {
    #[arg(long, conflicts_with = "camera")]
    dataset: Option<PathBuf>,
    /// Only this dataset view; all views otherwise.
    #[arg(long, requires = "dataset")]
    view: Option<usize>,
    /// A single camera as JSON.
    #[arg(long)]
    camera: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    container: PathBuf,
    #[arg(long)]
    decoders: PathBuf,
    #[arg(long)]
    key: Option<PathBuf>,
    #[command(flatten)]
    cameras: CameraArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    container: PathBuf,
    #[arg(long)]
    key: Option<PathBuf>,
    /// Needed for hidden views.
    #[arg(long)]
    decoders: Option<PathBuf>,
    #[command(flatten)]
    cameras: CameraArgs,
    /// Directory for hidden views or `bits.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long)]
    container: PathBuf,
    /// A container whose header is the reference schema.
    #[arg(long, conflicts_with = "k")]
    baseline: Option<PathBuf>,
    /// Compare against the plain anchor schema with this `k`.
    #[arg(long)]
    k: Option<usize>,
    /// Suspect box `x0,y0,z0,x1,y1,z1` to report on.
    #[arg(long)]
    region: Option<String>,
    /// Audit settings come from the `[audit]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the machine-readable report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "attack", required = true, multiple = false)]
struct AttackArgs {
    /// Standard deviation of Gaussian noise on anchor positions.
    #[arg(long)]
    noise: Option<f64>,
    /// Percentage of anchors to remove.
    #[arg(long)]
    prune: Option<f64>,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    container: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    attack: AttackArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
    Audit,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Audit => 3,
        }
    }
}

pub fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Render(a) => commands::render(a),
        Command::Decode(a) => commands::decode(a),
        Command::Audit(a) => commands::audit(a),
        Command::Perturb(a) => commands::perturb(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
                Failure::Audit => eprintln!("audit failed"),
            }
            ExitCode::from(f.code())
        }
    }
}
