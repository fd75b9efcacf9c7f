//! Dense small-matrix functions: exponential, principal logarithm, square
//! root, polar decomposition.
//!
//! Everything here targets the (dim+1)x(dim+1) matrices of 2-D/3-D affine
//! work; no attempt is made at large-matrix efficiency.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Induced 1-norm (maximum absolute column sum).
pub(crate) fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn check_square_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "{what}: expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what}: matrix has non-finite entries"
        )));
    }
    Ok(())
}

/// Matrix exponential by scaling and squaring around a Taylor core.
///
/// The argument is halved `k = max(0, ceil(log2(|M|_1)) + 1)` times, the
/// series is summed adaptively (at least 10 terms), and the result squared
/// back `k` times.
pub fn mat_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square_finite(m, "mat_exp")?;
    let n = m.nrows();
    let norm = one_norm(m);

    let k = if norm > 0.0 {
        (norm.log2().ceil() as i32 + 1).max(0) as u32
    } else {
        0
    };
    let scaled = m / 2f64.powi(k as i32);

    let mut acc = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for j in 1..=60u32 {
        term = (&term * &scaled) / f64::from(j);
        acc += &term;
        if j >= 10 && one_norm(&term) <= 1e-18 * one_norm(&acc) {
            break;
        }
    }

    let mut result = acc;
    for _ in 0..k {
        result = &result * &result;
    }
    Ok(result)
}

/// Principal square root (and its inverse) by the Denman-Beavers iteration.
///
/// Converges for matrices with no eigenvalue on the closed negative real
/// half-line, which callers are expected to have checked.
pub(crate) fn sqrtm_denman_beavers(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);

    for _ in 0..60 {
        let y_inv = y.clone().try_inverse().ok_or_else(|| {
            Error::SingularMatrix("square root iterate became singular".into())
        })?;
        let z_inv = z.clone().try_inverse().ok_or_else(|| {
            Error::SingularMatrix("square root iterate became singular".into())
        })?;
        let y_next = (&y + &z_inv) * 0.5;
        let z_next = (&z + &y_inv) * 0.5;
        let delta = one_norm(&(&y_next - &y));
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * one_norm(&y).max(1.0) {
            break;
        }
    }

    let residual = one_norm(&(&y * &y - a));
    if residual > 1e-6 * one_norm(a).max(1.0) {
        return Err(Error::InvalidArgument(
            "matrix square root iteration did not converge".into(),
        ));
    }
    Ok((y, z))
}

/// Eigenvalue screen for the principal logarithm.
///
/// Returns `SingularMatrix` when some eigenvalue vanishes and `LogNotDefined`
/// when one lies on the closed negative real half-line.
fn check_log_spectrum(a: &DMatrix<f64>) -> Result<()> {
    let eigs = a.clone().schur().complex_eigenvalues();
    let max_mag = eigs.iter().map(|e| e.norm()).fold(0.0, f64::max);
    for e in eigs.iter() {
        if e.norm() <= 1e-14 * max_mag.max(1.0) {
            return Err(Error::SingularMatrix(
                "zero eigenvalue: matrix logarithm requires an invertible matrix".into(),
            ));
        }
        if e.im.abs() <= 1e-12 * e.norm() && e.re <= 1e-12 {
            return Err(Error::LogNotDefined { re: e.re, im: e.im });
        }
    }
    Ok(())
}

/// True when `m` is a homogeneous affine matrix: last row exactly (0,...,0,1).
fn is_homogeneous_affine(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    if n < 2 {
        return false;
    }
    let last = m.row(n - 1);
    last.iter().take(n - 1).all(|&v| v == 0.0) && last[n - 1] == 1.0
}

/// Principal matrix logarithm by inverse scaling and squaring.
///
/// Square roots are taken (Denman-Beavers) until `|X - I|_1 < 0.25`, the
/// Mercator series of `log(I + E)` is summed adaptively, and the result is
/// scaled back by `2^k`. For homogeneous affine input the last row of the
/// log is zeroed exactly.
pub fn mat_log_principal(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square_finite(a, "mat_log_principal")?;
    check_log_spectrum(a)?;
    let n = a.nrows();
    let homogeneous = is_homogeneous_affine(a);
    let identity = DMatrix::<f64>::identity(n, n);

    let mut x = a.clone();
    let mut k = 0u32;
    while one_norm(&(&x - &identity)) >= 0.25 {
        let (root, _) = sqrtm_denman_beavers(&x)?;
        x = root;
        k += 1;
        if k > 60 {
            return Err(Error::InvalidArgument(
                "inverse scaling and squaring did not reach the series radius".into(),
            ));
        }
    }

    // log(I + E) = E - E^2/2 + E^3/3 - ...
    let e = &x - &identity;
    let mut acc = e.clone();
    let mut power = e.clone();
    for j in 2..=80u32 {
        power = &power * &e;
        let term = &power * (if j % 2 == 0 { -1.0 } else { 1.0 } / f64::from(j));
        acc += &term;
        if j >= 7 && one_norm(&power) / f64::from(j) <= 1e-18 * one_norm(&acc).max(1e-300) {
            break;
        }
    }

    let mut result = acc * 2f64.powi(k as i32);
    if homogeneous {
        for j in 0..n {
            result[(n - 1, j)] = 0.0;
        }
    }
    Ok(result)
}

/// Rotation and symmetric positive-definite stretch factors of a linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarFactors {
    /// Orthogonal factor with det = +1.
    pub rotation: DMatrix<f64>,
    /// Symmetric positive-definite factor; `rotation * stretch` rebuilds the input.
    pub stretch: DMatrix<f64>,
}

/// Polar decomposition `L = R S` via SVD.
///
/// Requires `det(L) > 0`; orientation-reversing or rank-deficient input is
/// rejected rather than silently flipped.
pub fn polar_decompose(l: &DMatrix<f64>) -> Result<PolarFactors> {
    check_square_finite(l, "polar_decompose")?;
    let n = l.nrows();

    let svd = l.clone().svd(true, true);
    let sigma = &svd.singular_values;
    let sig_max = sigma.iter().cloned().fold(0.0, f64::max);
    let sig_min = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    if sig_min <= 1e-12 * sig_max.max(1.0) {
        return Err(Error::InvalidArgument(
            "polar_decompose: rank-deficient linear part".into(),
        ));
    }
    let det = l.determinant();
    if det <= 0.0 {
        return Err(Error::OrientationReversing { det });
    }

    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");

    // det > 0 makes det(U V^T) = +1 automatically; the sign flip below only
    // guards against rounding on near-singular input.
    let mut u_adj = u.clone();
    let mut sigma_adj = sigma.clone();
    if (u * v_t).determinant() < 0.0 {
        for i in 0..n {
            u_adj[(i, n - 1)] = -u_adj[(i, n - 1)];
        }
        sigma_adj[n - 1] = -sigma_adj[n - 1];
    }

    let rotation = &u_adj * v_t;
    let v = v_t.transpose();
    let mut stretch = &v * DMatrix::from_diagonal(&sigma_adj) * v_t;
    // Enforce exact symmetry so downstream SPD math sees a clean input.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (stretch[(i, j)] + stretch[(j, i)]);
            stretch[(i, j)] = avg;
            stretch[(j, i)] = avg;
        }
    }

    Ok(PolarFactors { rotation, stretch })
}
