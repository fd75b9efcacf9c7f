pub mod affdist;
pub mod eval;
pub mod fusedemo;
pub mod phantom;
pub mod register;

use polyaffine_core::error::{Error, Result};
use polyaffine_core::volume::{read_volume, LabelVolume, Volume};

/// Read a path that must contain a label volume.
pub fn load_labels(path: &std::path::Path) -> Result<LabelVolume> {
    match read_volume(path)? {
        Volume::Label(v) => Ok(v),
        Volume::Scalar(_) => Err(Error::InvalidArgument(format!(
            "{}: expected a label volume, found float intensities",
            path.display()
        ))),
        Volume::Field(_) => Err(Error::InvalidArgument(format!(
            "{}: expected a label volume, found a vector field",
            path.display()
        ))),
    }
}

/// Print a usage complaint and exit with the usage code.
pub fn usage_bail(msg: &str) -> ! {
    eprintln!("error: usage: {msg}");
    std::process::exit(crate::exit::USAGE);
}
