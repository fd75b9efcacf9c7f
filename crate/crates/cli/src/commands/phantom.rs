use serde::Serialize;

use polyaffine_core::error::Result;
use polyaffine_core::evaluation::{make_phantom, PhantomKind, PhantomTruth};
use polyaffine_core::fusion::GridSpec;
use polyaffine_core::linalg::write_affine_text;
use polyaffine_core::volume::{write_field, write_label_volume};

use super::usage_bail;
use crate::PhantomArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum KindArg {
    Affine,
    Polyaffine,
}

#[derive(Serialize)]
struct Summary {
    kind: &'static str,
    n_regions: usize,
    size: usize,
    spacing: f64,
    magnitude: f64,
    seed: u64,
    outputs: std::collections::BTreeMap<&'static str, String>,
}

pub fn run(args: PhantomArgs) -> Result<()> {
    if args.size < 8 {
        usage_bail("--size must be at least 8 voxels");
    }
    if args.spacing <= 0.0 {
        usage_bail("--spacing must be positive");
    }
    let kind = match args.kind {
        KindArg::Affine => PhantomKind::Affine,
        KindArg::Polyaffine => PhantomKind::Polyaffine,
    };
    let grid = GridSpec::isotropic(vec![args.size; 3], args.spacing)?;
    let phantom = make_phantom(kind, args.n_regions, &grid, args.magnitude, args.seed)?;

    let mut outputs = std::collections::BTreeMap::new();
    write_label_volume(&phantom.reference, &args.out_ref)?;
    outputs.insert("reference", args.out_ref.display().to_string());
    write_label_volume(&phantom.moving, &args.out_mov)?;
    outputs.insert("moving", args.out_mov.display().to_string());
    match &phantom.truth {
        PhantomTruth::Affine(a) => {
            write_affine_text(a, &args.out_truth)?;
        }
        PhantomTruth::Field { forward, .. } => {
            write_field(forward, &args.out_truth)?;
        }
    }
    outputs.insert("truth", args.out_truth.display().to_string());

    let summary = Summary {
        kind: match kind {
            PhantomKind::Affine => "affine",
            PhantomKind::Polyaffine => "polyaffine",
        },
        n_regions: args.n_regions,
        size: args.size,
        spacing: args.spacing,
        magnitude: args.magnitude,
        seed: args.seed,
        outputs,
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}
