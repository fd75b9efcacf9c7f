use polyaffine_core::error::Result;
use polyaffine_core::evaluation::{affine_report, affine_report_text};
use polyaffine_core::linalg::read_affine_text;

use crate::AffdistArgs;

pub fn run(args: AffdistArgs) -> Result<()> {
    let a = read_affine_text(&args.a)?;
    let b = read_affine_text(&args.b)?;
    let distances = affine_report(&a, &b)?;
    eprint!("{}", affine_report_text(&distances));
    println!(
        "{}",
        serde_json::to_string_pretty(&distances).expect("distances serialize")
    );
    Ok(())
}
