//! `polyaffine`: centroid-driven affine and polyaffine registration.
//!
//! Subcommands: `register` (fit and write transforms), `eval` (Dice + QC),
//! `affdist` (geometric distances between two affine files), `phantom`
//! (synthetic test pairs), `fusedemo` (naive vs log-Euclidean fusion demo).
//!
//! Machine-readable JSON goes to stdout; human-readable diagnostics and
//! error lines go to stderr. Exit codes: 1 usage, 2 data, 3 numerical.

mod commands;
mod exit;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "polyaffine", version, about, disable_help_subcommand = true)]
struct Cli {
    /// Worker threads for voxel loops (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a transformation between two segmentations or centroid sets.
    Register(RegisterArgs),
    /// Dice overlap between two label volumes, with QC flagging.
    Eval(EvalArgs),
    /// Geometric distances between two affine text files.
    Affdist(AffdistArgs),
    /// Generate a synthetic phantom pair with known ground truth.
    Phantom(PhantomArgs),
    /// Render naive vs log-Euclidean fusion of two opposing rotations.
    Fusedemo(FusedemoArgs),
}

#[derive(Args)]
struct RegisterArgs {
    /// Reference segmentation (.nii/.nii.gz) or centroid CSV.
    #[arg(long = "ref")]
    pub(crate) reference: std::path::PathBuf,

    /// Moving segmentation (.nii/.nii.gz) or centroid CSV.
    #[arg(long = "mov")]
    pub(crate) moving: std::path::PathBuf,

    /// Transformation model.
    #[arg(long, value_enum, default_value_t = commands::register::Mode::Polyaffine)]
    pub(crate) mode: commands::register::Mode,

    /// Gaussian kernel width in mm; `0` collapses to the background affine,
    /// `inf` to the log-Euclidean mean of the local fits.
    #[arg(long, default_value_t = 15.0)]
    pub(crate) sigma: f64,

    /// Uniform background weight in the fusion denominator.
    #[arg(long, default_value_t = 1e-5)]
    pub(crate) wbg: f64,

    /// Velocity-field grid downsampling per axis.
    #[arg(long, default_value_t = 4)]
    pub(crate) downsample: usize,

    /// Scaling-and-squaring integration steps.
    #[arg(long, default_value_t = 7)]
    pub(crate) steps: u32,

    /// Labels to ignore when extracting centroids (comma-separated).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub(crate) exclude_labels: Vec<u32>,

    /// Also exclude FreeSurfer-style cerebral white matter (2, 41) and
    /// extra-cerebral CSF (24).
    #[arg(long, default_value_t = false)]
    pub(crate) exclude_brain_wm_csf: bool,

    /// Region weighting for the fits.
    #[arg(long, value_enum, default_value_t = commands::register::WeightArg::Uniform)]
    pub(crate) weight_mode: commands::register::WeightArg,

    /// Output path for the affine text file (always written).
    #[arg(long)]
    pub(crate) out_aff: std::path::PathBuf,

    /// Output path for the forward displacement field (.nii/.nii.gz).
    #[arg(long)]
    pub(crate) out_field: Option<std::path::PathBuf>,

    /// Output path for the inverse displacement field.
    #[arg(long)]
    pub(crate) out_field_inv: Option<std::path::PathBuf>,

    /// Resample the moving volume onto the reference grid and write it here.
    #[arg(long)]
    pub(crate) out_resampled: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference label volume.
    #[arg(long = "ref")]
    pub(crate) reference: std::path::PathBuf,

    /// Label volume to score against the reference (same grid).
    #[arg(long = "mov")]
    pub(crate) moving: std::path::PathBuf,

    /// Restrict scoring to these labels (comma-separated).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub(crate) labels: Vec<u32>,

    /// JSON file mapping group names to label lists for group means.
    #[arg(long)]
    pub(crate) groups: Option<std::path::PathBuf>,

    /// Mean-Dice failure threshold (flagged when strictly below).
    #[arg(long, default_value_t = 0.34)]
    pub(crate) threshold: f64,
}

#[derive(Args)]
struct AffdistArgs {
    /// First affine text file.
    #[arg(long)]
    pub(crate) a: std::path::PathBuf,

    /// Second affine text file.
    #[arg(long)]
    pub(crate) b: std::path::PathBuf,
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom kind.
    #[arg(long, value_enum, default_value_t = commands::phantom::KindArg::Affine)]
    pub(crate) kind: commands::phantom::KindArg,

    /// Number of labeled regions.
    #[arg(long, default_value_t = 8)]
    pub(crate) n_regions: usize,

    /// Cubic grid size in voxels.
    #[arg(long, default_value_t = 64)]
    pub(crate) size: usize,

    /// Isotropic voxel spacing in mm.
    #[arg(long, default_value_t = 1.0)]
    pub(crate) spacing: f64,

    /// Deformation magnitude in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub(crate) magnitude: f64,

    /// Random seed; identical seeds give bitwise-identical phantoms.
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,

    /// Output path for the reference label volume.
    #[arg(long)]
    pub(crate) out_ref: std::path::PathBuf,

    /// Output path for the moving label volume.
    #[arg(long)]
    pub(crate) out_mov: std::path::PathBuf,

    /// Output path for the ground truth (affine text or field volume,
    /// depending on --kind).
    #[arg(long)]
    pub(crate) out_truth: std::path::PathBuf,
}

#[derive(Args)]
struct FusedemoArgs {
    /// Rotation angle of the two opposing local transforms, in radians.
    #[arg(long, default_value_t = 2.5)]
    pub(crate) angle: f64,

    /// Output PPM image of the naively fused deformed grid.
    #[arg(long)]
    pub(crate) out_naive: std::path::PathBuf,

    /// Output PPM image of the log-Euclidean fused deformed grid.
    #[arg(long)]
    pub(crate) out_lept: std::path::PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("error: usage: {}", one_line(&e.to_string()));
            std::process::exit(exit::USAGE);
        }
    };

    if cli.threads > 0 {
        // Ignore failure: the global pool may already be initialized.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }

    let result = match cli.command {
        Command::Register(args) => commands::register::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Affdist(args) => commands::affdist::run(args),
        Command::Phantom(args) => commands::phantom::run(args),
        Command::Fusedemo(args) => commands::fusedemo::run(args),
    };

    if let Err(e) = result {
        eprintln!("error: {}: {}", exit::kind_name(&e), one_line(&e.to_string()));
        std::process::exit(exit::code_for(&e));
    }
}

fn one_line(s: &str) -> String {
    s.lines().next().unwrap_or_default().to_string()
}
