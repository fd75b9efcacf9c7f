use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use polyaffine_core::error::Result;
use polyaffine_core::fusion::{FusionParams, GridSpec};
use polyaffine_core::linalg::write_affine_text;
use polyaffine_core::pipeline::{register, RegistrationMode, StageTiming};
use polyaffine_core::pointset::{
    centroids_from_labels, read_pointset_csv, LabeledPointSet, WeightMode,
};
use polyaffine_core::volume::{resample_labels, write_field, write_label_volume, LabelVolume, ResampleTransform};

use super::{load_labels, usage_bail};
use crate::RegisterArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Affine,
    Polyaffine,
    Translations,
}

impl From<Mode> for RegistrationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Affine => RegistrationMode::Affine,
            Mode::Polyaffine => RegistrationMode::Polyaffine,
            Mode::Translations => RegistrationMode::Translations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum WeightArg {
    Uniform,
    SizeProportional,
}

impl From<WeightArg> for WeightMode {
    fn from(w: WeightArg) -> Self {
        match w {
            WeightArg::Uniform => WeightMode::Uniform,
            WeightArg::SizeProportional => WeightMode::SizeProportional,
        }
    }
}

enum Input {
    Points(LabeledPointSet),
    Labels(Box<LabelVolume>, LabeledPointSet),
}

impl Input {
    fn points(&self) -> &LabeledPointSet {
        match self {
            Input::Points(p) => p,
            Input::Labels(_, p) => p,
        }
    }
}

fn load_input(path: &Path, exclude: &[u32], weight_mode: WeightMode) -> Result<Input> {
    if path.extension().is_some_and(|e| e == "csv") {
        Ok(Input::Points(read_pointset_csv(path)?))
    } else {
        let volume = load_labels(path)?;
        let points = centroids_from_labels(&volume, exclude, weight_mode)?;
        Ok(Input::Labels(Box::new(volume), points))
    }
}

/// Fallback field grid when the reference is a centroid CSV: the points'
/// bounding box padded by max(2 sigma, 16 mm), 1 mm isotropic.
fn grid_from_points(points: &LabeledPointSet, sigma: f64) -> Result<GridSpec> {
    let dim = points.dim();
    let pad = if sigma.is_finite() { (2.0 * sigma).max(16.0) } else { 16.0 };
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in points.points() {
        for k in 0..dim {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut m = DMatrix::<f64>::identity(dim + 1, dim + 1);
    let mut dims = Vec::with_capacity(dim);
    for k in 0..dim {
        m[(k, dim)] = lo[k] - pad;
        dims.push(((hi[k] - lo[k]) + 2.0 * pad).ceil() as usize + 1);
    }
    GridSpec::new(dims, m)
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: &'a str,
    sigma: f64,
    w_background: f64,
    downsample: usize,
    steps: u32,
    weight_mode: &'a str,
    n_reference_points: usize,
    n_moving_points: usize,
    background_affine: Vec<Vec<f64>>,
    fit_statuses: &'a [polyaffine_core::matching::FitStatus],
    timings: &'a [StageTiming],
    outputs: std::collections::BTreeMap<&'static str, String>,
}

pub fn run(args: RegisterArgs) -> Result<()> {
    if args.sigma.is_nan() || args.sigma < 0.0 {
        usage_bail("--sigma must be >= 0 (or `inf`)");
    }
    let mode: RegistrationMode = args.mode.into();
    if mode == RegistrationMode::Affine
        && (args.out_field.is_some() || args.out_field_inv.is_some())
    {
        usage_bail("--out-field/--out-field-inv need --mode polyaffine or translations");
    }

    let mut exclude = args.exclude_labels.clone();
    if args.exclude_brain_wm_csf {
        exclude.extend_from_slice(&[2, 41, 24]);
    }
    let weight_mode: WeightMode = args.weight_mode.into();

    let reference = load_input(&args.reference, &exclude, weight_mode)?;
    let moving = load_input(&args.moving, &exclude, weight_mode)?;

    let params = FusionParams {
        sigma: args.sigma,
        w_background: args.wbg,
        downsample: args.downsample,
        steps: args.steps,
    };

    let grid = match (&reference, mode) {
        (_, RegistrationMode::Affine) => None,
        (Input::Labels(volume, _), _) => Some(volume.grid().clone()),
        (Input::Points(points), _) => Some(grid_from_points(points, params.sigma)?),
    };

    if args.out_resampled.is_some()
        && (!matches!(reference, Input::Labels(..)) || !matches!(moving, Input::Labels(..)))
    {
        usage_bail("--out-resampled needs volume inputs for both --ref and --mov");
    }

    let result = register(
        reference.points(),
        moving.points(),
        mode,
        &params,
        grid.as_ref(),
    )?;

    let mut outputs = std::collections::BTreeMap::new();
    write_affine_text(&result.background_affine, &args.out_aff)?;
    outputs.insert("affine", args.out_aff.display().to_string());

    if let (Some(path), Some(field)) = (&args.out_field, &result.forward_field) {
        write_field(field, path)?;
        outputs.insert("field", path.display().to_string());
    }
    if let (Some(path), Some(field)) = (&args.out_field_inv, &result.inverse_field) {
        write_field(field, path)?;
        outputs.insert("field_inverse", path.display().to_string());
    }
    if let (Some(path), Input::Labels(mov_vol, _)) = (&args.out_resampled, &moving) {
        let target = grid
            .as_ref()
            .cloned()
            .unwrap_or_else(|| match &reference {
                Input::Labels(ref_vol, _) => ref_vol.grid().clone(),
                Input::Points(_) => unreachable!("checked above"),
            });
        let resampled = match &result.forward_field {
            Some(field) => resample_labels(mov_vol, ResampleTransform::Dense(field), &target)?,
            None => resample_labels(
                mov_vol,
                ResampleTransform::Affine(&result.background_affine),
                &target,
            )?,
        };
        write_label_volume(&resampled, path)?;
        outputs.insert("resampled", path.display().to_string());
    }

    let hom = result.background_affine.homogeneous();
    let summary = Summary {
        mode: match mode {
            RegistrationMode::Affine => "affine",
            RegistrationMode::Polyaffine => "polyaffine",
            RegistrationMode::Translations => "translations",
        },
        sigma: params.sigma,
        w_background: params.w_background,
        downsample: params.downsample,
        steps: params.steps,
        weight_mode: match weight_mode {
            WeightMode::Uniform => "uniform",
            WeightMode::SizeProportional => "size_proportional",
        },
        n_reference_points: reference.points().len(),
        n_moving_points: moving.points().len(),
        background_affine: (0..hom.nrows())
            .map(|r| (0..hom.ncols()).map(|c| hom[(r, c)]).collect())
            .collect(),
        fit_statuses: &result.statuses,
        timings: &result.timings,
        outputs,
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}
