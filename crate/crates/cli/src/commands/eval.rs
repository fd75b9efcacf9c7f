use std::collections::BTreeMap;

use serde::Serialize;

use polyaffine_core::error::{Error, Result};
use polyaffine_core::evaluation::{dice, qc_flag, DiceReport};

use super::load_labels;
use crate::EvalArgs;

#[derive(Serialize)]
struct Summary {
    #[serde(flatten)]
    report: DiceReport,
    threshold: f64,
    flagged: bool,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let reference = load_labels(&args.reference)?;
    let moving = load_labels(&args.moving)?;

    let labels = if args.labels.is_empty() {
        None
    } else {
        Some(args.labels.as_slice())
    };
    let mut report = dice(&moving, &reference, labels)?;

    if let Some(path) = &args.groups {
        let text = std::fs::read_to_string(path)?;
        let groups: BTreeMap<String, Vec<u32>> =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("groups file: {e}")))?;
        report = report.with_groups(&groups);
    }

    let flagged = qc_flag(&report, args.threshold);
    eprint!("{}", report.to_text());
    eprintln!(
        "{:>8}  {}",
        "qc",
        if flagged { "FLAGGED" } else { "ok" }
    );
    let summary = Summary {
        report,
        threshold: args.threshold,
        flagged,
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}
