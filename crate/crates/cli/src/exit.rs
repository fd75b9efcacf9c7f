//! Exit-code policy: 1 usage, 2 data, 3 numerical.

use polyaffine_core::Error;

pub const USAGE: i32 = 1;
pub const DATA: i32 = 2;
pub const NUMERICAL: i32 = 3;

pub fn code_for(e: &Error) -> i32 {
    match e {
        Error::Stage { source, .. } => code_for(source),
        Error::LogNotDefined { .. }
        | Error::SingularMatrix(_)
        | Error::OrientationReversing { .. }
        | Error::DegenerateConfiguration(_)
        | Error::IndeterminateWeight(..)
        | Error::IntegrationDiverged { .. } => NUMERICAL,
        _ => DATA,
    }
}

pub fn kind_name(e: &Error) -> &'static str {
    match e {
        Error::Stage { source, .. } => kind_name(source),
        Error::InvalidArgument(_) => "invalid-argument",
        Error::SingularMatrix(_) => "singular-matrix",
        Error::LogNotDefined { .. } => "log-not-defined",
        Error::OrientationReversing { .. } => "orientation-reversing",
        Error::DegenerateConfiguration(_) => "degenerate-configuration",
        Error::InsufficientCorrespondence { .. } => "insufficient-correspondence",
        Error::EmptySegmentation => "empty-segmentation",
        Error::IndeterminateWeight(..) => "indeterminate-weight",
        Error::IntegrationDiverged { .. } => "integration-diverged",
        Error::UnsupportedFormat(_) => "unsupported-format",
        Error::CorruptFile(_) => "corrupt-file",
        Error::GridMismatch(_) => "grid-mismatch",
        Error::Io(_) => "io",
        Error::Parse(_) => "parse",
    }
}
