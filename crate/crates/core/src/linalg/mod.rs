//! Affine transforms in 2-D/3-D and the small-matrix functions behind them.
//!
//! An [`AffineTransform`] maps world coordinates (mm) to world coordinates:
//! `x -> L x + t`. Its homogeneous form is `[[L, t], [0, 1]]`, which is what
//! the matrix logarithm and exponential act on.

mod funcs;

pub use funcs::{mat_exp, mat_log_principal, polar_decompose, PolarFactors};
pub(crate) use funcs::sqrtm_denman_beavers;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// An invertible affine map `x -> L x + t` in `dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    dim: usize,
    linear: DMatrix<f64>,
    translation: DVector<f64>,
}

impl AffineTransform {
    /// Build from a linear part and translation. `dim` must be 2 or 3.
    pub fn new(linear: DMatrix<f64>, translation: DVector<f64>) -> Result<Self> {
        let dim = linear.nrows();
        if !(2..=3).contains(&dim) || linear.ncols() != dim {
            return Err(Error::InvalidArgument(format!(
                "affine linear part must be 2x2 or 3x3, got {}x{}",
                linear.nrows(),
                linear.ncols()
            )));
        }
        if translation.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "translation length {} does not match dim {dim}",
                translation.len()
            )));
        }
        if linear.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "affine transform has non-finite entries".into(),
            ));
        }
        Ok(Self {
            dim,
            linear,
            translation,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            linear: DMatrix::identity(dim, dim),
            translation: DVector::zeros(dim),
        }
    }

    pub fn pure_translation(t: DVector<f64>) -> Result<Self> {
        let dim = t.len();
        Self::new(DMatrix::identity(dim, dim), t)
    }

    /// Rebuild from a homogeneous `(dim+1)x(dim+1)` matrix with unit last row.
    pub fn from_homogeneous(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n != m.ncols() || !(3..=4).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "homogeneous affine must be 3x3 or 4x4, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let dim = n - 1;
        let last = m.row(dim);
        let row_ok = last.iter().take(dim).all(|&v| v.abs() < 1e-9)
            && (last[dim] - 1.0).abs() < 1e-9;
        if !row_ok {
            return Err(Error::InvalidArgument(
                "homogeneous affine must have last row (0,...,0,1)".into(),
            ));
        }
        let linear = m.view((0, 0), (dim, dim)).into_owned();
        let translation = m.view((0, dim), (dim, 1)).into_owned().column(0).into();
        Self::new(linear, translation)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn linear(&self) -> &DMatrix<f64> {
        &self.linear
    }

    pub fn translation(&self) -> &DVector<f64> {
        &self.translation
    }

    /// Homogeneous form `[[L, t], [0, 1]]`.
    pub fn homogeneous(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut m = DMatrix::<f64>::identity(d + 1, d + 1);
        m.view_mut((0, 0), (d, d)).copy_from(&self.linear);
        m.view_mut((0, d), (d, 1)).copy_from(&self.translation);
        m
    }

    /// Apply to a point.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.linear * x + &self.translation
    }

    /// Composition `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> Result<AffineTransform> {
        if self.dim != other.dim {
            return Err(Error::InvalidArgument(format!(
                "cannot compose affines of dim {} and {}",
                self.dim, other.dim
            )));
        }
        Ok(AffineTransform {
            dim: self.dim,
            linear: &self.linear * &other.linear,
            translation: &self.linear * &other.translation + &self.translation,
        })
    }

    /// Inverse map: `L^-1, -L^-1 t`.
    pub fn inverse(&self) -> Result<AffineTransform> {
        let inv = self.linear.clone().try_inverse().ok_or_else(|| {
            Error::SingularMatrix("affine linear part is singular".into())
        })?;
        let max_abs = self.linear.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if inv.iter().any(|v| !v.is_finite()) || self.linear.determinant().abs() < 1e-300 * max_abs.max(1.0)
        {
            return Err(Error::SingularMatrix(
                "affine linear part is singular to machine precision".into(),
            ));
        }
        let translation = -(&inv * &self.translation);
        Ok(AffineTransform {
            dim: self.dim,
            linear: inv,
            translation,
        })
    }

    /// Principal logarithm of the homogeneous form.
    pub fn log(&self) -> Result<LogAffine> {
        let log = mat_log_principal(&self.homogeneous())?;
        Ok(LogAffine {
            dim: self.dim,
            matrix: log,
        })
    }
}

/// Element of the affine Lie algebra: a `(dim+1)x(dim+1)` matrix whose last
/// row is exactly zero. Exponentiating recovers an [`AffineTransform`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogAffine {
    dim: usize,
    matrix: DMatrix<f64>,
}

impl LogAffine {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() || !(3..=4).contains(&n) {
            return Err(Error::InvalidArgument(
                "log-affine matrix must be 3x3 or 4x4".into(),
            ));
        }
        if matrix.row(n - 1).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument(
                "log-affine matrix must have an exactly zero last row".into(),
            ));
        }
        Ok(Self {
            dim: n - 1,
            matrix,
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            matrix: DMatrix::zeros(dim + 1, dim + 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Exponentiate back to the transform this log was taken from.
    pub fn exp(&self) -> Result<AffineTransform> {
        let mut e = mat_exp(&self.matrix)?;
        // exp of a zero-last-row matrix has unit last row up to rounding.
        let n = self.dim + 1;
        for j in 0..self.dim {
            e[(n - 1, j)] = 0.0;
        }
        e[(n - 1, n - 1)] = 1.0;
        AffineTransform::from_homogeneous(&e)
    }
}

/// Geometric distances between two affine transforms, one per component.
///
/// `linear`, `rotation` and `stretch` are Frobenius norms of matrix logs on
/// GL(d), SO(d) and Sym+(d); `translation` is the Euclidean distance in mm.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineDistances {
    pub linear: f64,
    pub rotation: f64,
    pub stretch: f64,
    pub translation: f64,
}

/// Component-wise geometric distances between `a` and `b`:
/// `|log(L_a^-1 L_b)|_F`, `|log(R_a^T R_b)|_F`,
/// `|log(S_a^-1/2 S_b S_a^-1/2)|_F`, `|t_a - t_b|_2`.
pub fn affine_distances(a: &AffineTransform, b: &AffineTransform) -> Result<AffineDistances> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(
            "affine_distances: dimension mismatch".into(),
        ));
    }

    let la_inv = a.linear().clone().try_inverse().ok_or_else(|| {
        Error::SingularMatrix("affine_distances: first linear part is singular".into())
    })?;
    let d_linear = mat_log_principal(&(&la_inv * b.linear()))?.norm();

    let pa = polar_decompose(a.linear())?;
    let pb = polar_decompose(b.linear())?;
    let d_rotation = mat_log_principal(&(pa.rotation.transpose() * &pb.rotation))?.norm();

    // S_a^-1/2 from the same square-root iteration used by the log.
    let (_, sa_inv_half) = sqrtm_denman_beavers(&pa.stretch)?;
    let mut mid = &sa_inv_half * &pb.stretch * &sa_inv_half;
    let n = mid.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (mid[(i, j)] + mid[(j, i)]);
            mid[(i, j)] = avg;
            mid[(j, i)] = avg;
        }
    }
    let d_stretch = mat_log_principal(&mid)?.norm();

    let d_translation = (a.translation() - b.translation()).norm();

    Ok(AffineDistances {
        linear: d_linear,
        rotation: d_rotation,
        stretch: d_stretch,
        translation: d_translation,
    })
}

/// Render in the affine text format: one homogeneous matrix, row-major,
/// whitespace-separated, one row per line. The matrix maps reference world
/// coordinates to moving world coordinates.
pub fn affine_to_text(a: &AffineTransform) -> String {
    let m = a.homogeneous();
    let n = a.dim() + 1;
    let mut out = String::new();
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                out.push(' ');
            }
            // `{}` prints the shortest digits that round-trip f64 exactly.
            let _ = write!(out, "{}", m[(i, j)]);
        }
        out.push('\n');
    }
    out
}

/// Parse the affine text format (3x3 or 4x4).
pub fn affine_from_text(text: &str) -> Result<AffineTransform> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad number `{tok}` in affine text")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let n = rows.len();
    if !(3..=4).contains(&n) || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse(format!(
            "affine text must be a 3x3 or 4x4 matrix, got {n} rows"
        )));
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    AffineTransform::from_homogeneous(&m)
}

pub fn write_affine_text(a: &AffineTransform, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, affine_to_text(a))?;
    Ok(())
}

pub fn read_affine_text(path: impl AsRef<Path>) -> Result<AffineTransform> {
    let text = std::fs::read_to_string(&path)?;
    affine_from_text(&text)
}
