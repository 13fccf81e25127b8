//! Command-line front end for `cluster-degen`.
//!
//! Exit codes: 0 success, 1 invalid input, 2 degenerate (`analyze --strict`),
//! 3 internal or usage error.

pub mod commands;
pub mod scenario_file;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::CliError;

/// Seed used by every randomized command when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "cluster-degen", version, about = "Degeneracy analysis for two-keyframe multi-camera cluster SLAM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario file against the modelling assumptions.
    Validate {
        file: PathBuf,
    },
    /// Classify a scenario as degenerate, near-degenerate or non-degenerate.
    Analyze(AnalyzeArgs),
    /// Sweep the translation over a grid and export subset determinants.
    Sweep(SweepArgs),
    /// Solve the bundle adjustment from a perturbed start.
    Solve(SolveArgs),
    /// Generate a random scenario file.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub file: PathBuf,
    /// Relative singular-value tolerance for rank decisions.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// σ₆/σ₁ at or below this is reported as near-degenerate.
    #[arg(long, default_value_t = 1e-5)]
    pub near: f64,
    /// Exit with status 2 when the scenario is degenerate.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub file: PathBuf,
    /// Translation components spanned by the grid, e.g. `xy` or `xz`.
    #[arg(long, default_value = "xy")]
    pub axes: String,
    /// Range of the first grid axis as `lo:hi`.
    #[arg(long, default_value = "-3:3", allow_hyphen_values = true)]
    pub range_a: String,
    /// Range of the second grid axis as `lo:hi`.
    #[arg(long, default_value = "-3:3", allow_hyphen_values = true)]
    pub range_b: String,
    /// Grid lines per axis.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Fixed value of the remaining translation component (t_z for `xy`).
    #[arg(long = "slice-tz", visible_alias = "slice", allow_hyphen_values = true)]
    pub slice: Option<f64>,
    /// Determinants below this magnitude count as zero.
    #[arg(long, default_value_t = 1e-8)]
    pub abs_tol: f64,
    /// Intersection radius in cells.
    #[arg(long, default_value_t = 2.0)]
    pub radius: f64,
    /// Maximum number of 6-row subsets once there are more than ten rows.
    #[arg(long, default_value_t = 210)]
    pub max_subsets: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Determinant CSV; the intersections go next to it as `<stem>.intersections.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub file: PathBuf,
    /// Standard deviation of image noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Relative perturbation of the initial state.
    #[arg(long, default_value_t = 0.01)]
    pub perturb: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_iterations: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Camera preset (`single`, `back-to-back`, `triangle`, `planar4`, `ring:N`) or a scenario file.
    #[arg(long, default_value = "triangle")]
    pub cameras: String,
    /// Ring radius in metres for the presets; the back-to-back baseline is twice this.
    #[arg(long, default_value_t = 0.3)]
    pub radius: f64,
    #[arg(long, default_value_t = 8)]
    pub features: usize,
    /// Number of features re-observed by a different camera.
    #[arg(long, default_value_t = 0)]
    pub cross_camera: usize,
    /// `t=x,y,z;omega=a,b,c` or a construction name
    /// (`pure-translation`, `in-plane-rotation`, `quarter-turn`, `concentric-circles`).
    #[arg(long, default_value = "t=0.4,-0.1,0.3;omega=0.05,0.2,-0.1", allow_hyphen_values = true)]
    pub motion: String,
    /// `auto` or `same-camera`.
    #[arg(long, default_value = "auto")]
    pub topology: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub description: Option<String>,
    /// Output path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 3;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match commands::dispatch(&cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
