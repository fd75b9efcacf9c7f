//! Anatomically grounded affine and polyaffine registration from labeled
//! feature points.
//!
//! The pipeline takes corresponding labeled points (typically centroids of
//! segmented regions in two images), fits a global affine in closed form,
//! fits one local affine per Delaunay neighborhood, fuses the local logs
//! into a stationary velocity field with Gaussian weight maps, and
//! integrates by scaling and squaring into a diffeomorphic displacement
//! field. Inverses come for free by negating the velocity field.
//!
//! Modules follow the processing order:
//! - [`linalg`]: affine transforms, matrix exp/log, polar decomposition,
//!   geometric distances.
//! - [`pointset`]: labeled, weighted point sets and centroid extraction.
//! - [`matching`]: weighted least-squares affine fits and Delaunay
//!   neighborhoods.
//! - [`fusion`]: weight maps, velocity-field assembly, integration,
//!   composition.
//! - [`volume`]: minimal NIfTI-1 label/scalar/vector volume I/O and
//!   resampling.
//! - [`evaluation`]: Dice overlap, QC flagging, affine reports, synthetic
//!   phantoms.
//! - [`pipeline`]: the end-to-end registration entry point.

pub mod error;
pub mod evaluation;
mod exec;
pub mod fusion;
pub mod linalg;
pub mod matching;
pub mod pipeline;
pub mod pointset;
pub mod volume;

pub use error::{Error, Result};
