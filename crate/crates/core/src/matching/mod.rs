//! Closed-form global and local affine estimation between paired point sets.
//!
//! The global fit solves the weighted linear least squares problem
//! `argmin_{L,t} sum_i a_i |y_i - (L x_i + t)|^2` in closed form:
//! `L = (sum a y' x'^T)(sum a x' x'^T)^-1`, `t = y_bar - L x_bar`, with
//! weighted means and centered coordinates. Local fits solve the same
//! problem restricted to each Delaunay neighborhood of the reference set.

mod delaunay;

pub use delaunay::{delaunay_neighborhoods, NeighborhoodGraph};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{AffineTransform, LogAffine};

/// Scatter matrices above this condition number are treated as degenerate.
const CONDITION_LIMIT: f64 = 1e12;

/// Outcome of one local neighborhood fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    /// Full affine fit succeeded and its log exists.
    Affine,
    /// Translation-only mode was requested.
    Translation,
    /// Affine fit fell back to translation-only for this neighborhood.
    TranslationFallback(FallbackReason),
}

/// Why a neighborhood fell back to a translation-only fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    /// Scatter matrix condition number above 1e12 (coplanar or tiny neighborhood).
    IllConditioned,
    /// Fitted linear part had det <= 0.
    NonPositiveDeterminant,
    /// Fitted linear part had an eigenvalue on the closed negative half-line.
    LogUndefined,
}

/// The local affine transformations attached to the reference points: one
/// anchor (weighted neighborhood barycenter), transform and log per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAffineSet {
    dim: usize,
    anchors: Vec<DVector<f64>>,
    transforms: Vec<AffineTransform>,
    logs: Vec<LogAffine>,
}

impl LocalAffineSet {
    pub fn new(
        anchors: Vec<DVector<f64>>,
        transforms: Vec<AffineTransform>,
    ) -> Result<LocalAffineSet> {
        if anchors.is_empty() || anchors.len() != transforms.len() {
            return Err(Error::InvalidArgument(
                "anchors and transforms must be non-empty and of equal length".into(),
            ));
        }
        let dim = transforms[0].dim();
        if anchors.iter().any(|a| a.len() != dim) || transforms.iter().any(|t| t.dim() != dim) {
            return Err(Error::InvalidArgument(
                "anchors and transforms must share one dimension".into(),
            ));
        }
        let logs = transforms
            .iter()
            .map(AffineTransform::log)
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalAffineSet {
            dim,
            anchors,
            transforms,
            logs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn anchors(&self) -> &[DVector<f64>] {
        &self.anchors
    }

    pub fn transforms(&self) -> &[AffineTransform] {
        &self.transforms
    }

    pub fn logs(&self) -> &[LogAffine] {
        &self.logs
    }

    /// Serialize to the debugging JSON document: anchors plus row-major
    /// homogeneous matrices (logs are recomputed on load).
    pub fn to_json(&self) -> String {
        let doc = LocalAffineSetDoc {
            dim: self.dim,
            locals: self
                .anchors
                .iter()
                .zip(&self.transforms)
                .map(|(anchor, transform)| LocalAffineDoc {
                    anchor: anchor.iter().cloned().collect(),
                    matrix: homogeneous_rows(transform),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<LocalAffineSet> {
        let doc: LocalAffineSetDoc =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let n = doc.dim + 1;
        let mut anchors = Vec::with_capacity(doc.locals.len());
        let mut transforms = Vec::with_capacity(doc.locals.len());
        for local in &doc.locals {
            if local.anchor.len() != doc.dim || local.matrix.len() != n {
                return Err(Error::Parse("local affine document has wrong shape".into()));
            }
            if local.matrix.iter().any(|row| row.len() != n) {
                return Err(Error::Parse("local affine matrix rows have wrong length".into()));
            }
            anchors.push(DVector::from_column_slice(&local.anchor));
            let m = DMatrix::from_fn(n, n, |i, j| local.matrix[i][j]);
            transforms.push(AffineTransform::from_homogeneous(&m)?);
        }
        LocalAffineSet::new(anchors, transforms)
    }
}

fn homogeneous_rows(t: &AffineTransform) -> Vec<Vec<f64>> {
    let m = t.homogeneous();
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct LocalAffineSetDoc {
    dim: usize,
    locals: Vec<LocalAffineDoc>,
}

#[derive(Serialize, Deserialize)]
struct LocalAffineDoc {
    anchor: Vec<f64>,
    matrix: Vec<Vec<f64>>,
}

fn check_point_lists(x: &[DVector<f64>], y: &[DVector<f64>]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "point lists must be non-empty and of equal length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let dim = x[0].len();
    if x.iter().chain(y.iter()).any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument(
            "all points must share one dimension".into(),
        ));
    }
    Ok(dim)
}

/// Weighted means and the centered scatter/cross matrices of a point pairing.
struct Moments {
    x_bar: DVector<f64>,
    y_bar: DVector<f64>,
    scatter: DMatrix<f64>,
    cross: DMatrix<f64>,
}

fn moments(x: &[DVector<f64>], y: &[DVector<f64>], weights: &[f64]) -> Result<Moments> {
    let dim = x[0].len();
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || wsum <= 0.0 {
        return Err(Error::InvalidArgument(
            "weights must be nonnegative, finite and not all zero".into(),
        ));
    }
    let mut x_bar = DVector::zeros(dim);
    let mut y_bar = DVector::zeros(dim);
    for ((xi, yi), &w) in x.iter().zip(y).zip(weights) {
        x_bar += xi * w;
        y_bar += yi * w;
    }
    x_bar /= wsum;
    y_bar /= wsum;

    let mut scatter = DMatrix::zeros(dim, dim);
    let mut cross = DMatrix::zeros(dim, dim);
    for ((xi, yi), &w) in x.iter().zip(y).zip(weights) {
        let xc = xi - &x_bar;
        let yc = yi - &y_bar;
        scatter += &xc * xc.transpose() * w;
        cross += &yc * xc.transpose() * w;
    }
    Ok(Moments {
        x_bar,
        y_bar,
        scatter,
        cross,
    })
}

fn scatter_condition(scatter: &DMatrix<f64>) -> f64 {
    let svals = scatter.clone().svd(false, false).singular_values;
    let smax = svals.iter().cloned().fold(0.0, f64::max);
    let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Closed-form weighted linear least squares affine fit `y ~ L x + t`.
pub fn fit_affine_wlls(
    x: &[DVector<f64>],
    y: &[DVector<f64>],
    weights: &[f64],
) -> Result<AffineTransform> {
    let dim = check_point_lists(x, y)?;
    if weights.len() != x.len() {
        return Err(Error::InvalidArgument(
            "weights must match the point count".into(),
        ));
    }
    if x.len() < dim + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} correspondences for a {dim}-D affine fit, got {}",
            dim + 1,
            x.len()
        )));
    }
    let m = moments(x, y, weights)?;
    if scatter_condition(&m.scatter) > CONDITION_LIMIT {
        return Err(Error::DegenerateConfiguration(
            "scatter matrix is numerically singular (points affinely dependent)".into(),
        ));
    }
    let scatter_inv = m
        .scatter
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("scatter matrix not invertible".into()))?;
    let linear = &m.cross * scatter_inv;
    let translation = &m.y_bar - &linear * &m.x_bar;
    AffineTransform::new(linear, translation)
}

/// Map points through the inverse of `a`: `y ~> L^-1 (y - t)`.
pub fn prealign(points: &[DVector<f64>], a: &AffineTransform) -> Result<Vec<DVector<f64>>> {
    let inv = a.inverse()?;
    Ok(points.iter().map(|p| inv.apply(p)).collect())
}

/// Translation-only fit with the same weighting: `t = y_bar - x_bar`.
fn translation_fit(
    x: &[DVector<f64>],
    y: &[DVector<f64>],
    weights: &[f64],
) -> Result<AffineTransform> {
    let m = moments(x, y, weights)?;
    AffineTransform::pure_translation(&m.y_bar - &m.x_bar)
}

/// Fit one local affine per neighborhood of `graph`, with a translation-only
/// fallback wherever the full fit is degenerate or has no principal log.
///
/// `graph` must have been built on the reference points; the index
/// correspondence transfers it to the pre-aligned moving points. Anchors are
/// the weighted barycenters of the reference neighborhoods.
pub fn fit_local_affines(
    graph: &NeighborhoodGraph,
    x: &[DVector<f64>],
    y_tilde: &[DVector<f64>],
    weights: &[f64],
) -> Result<(LocalAffineSet, Vec<FitStatus>)> {
    let dim = check_point_lists(x, y_tilde)?;
    if graph.len() != x.len() || weights.len() != x.len() {
        return Err(Error::InvalidArgument(
            "graph, point lists and weights must agree in length".into(),
        ));
    }

    let fits: Vec<Result<(DVector<f64>, AffineTransform, FitStatus)>> =
        exec::map_indices(x.len(), |i| {
            let idx = graph.neighborhood(i);
            let xs: Vec<DVector<f64>> = idx.iter().map(|&p| x[p].clone()).collect();
            let ys: Vec<DVector<f64>> = idx.iter().map(|&p| y_tilde[p].clone()).collect();
            let ws: Vec<f64> = idx.iter().map(|&p| weights[p]).collect();

            let m = moments(&xs, &ys, &ws)?;
            let anchor = m.x_bar.clone();

            let attempt = if xs.len() < dim + 1 || scatter_condition(&m.scatter) > CONDITION_LIMIT {
                Err(FallbackReason::IllConditioned)
            } else {
                match fit_affine_wlls(&xs, &ys, &ws) {
                    Ok(t) if t.linear().determinant() <= 0.0 => {
                        Err(FallbackReason::NonPositiveDeterminant)
                    }
                    Ok(t) => match t.log() {
                        Ok(_) => Ok(t),
                        Err(Error::LogNotDefined { .. }) => Err(FallbackReason::LogUndefined),
                        Err(e) => return Err(e),
                    },
                    Err(Error::DegenerateConfiguration(_)) => Err(FallbackReason::IllConditioned),
                    Err(e) => return Err(e),
                }
            };

            Ok(match attempt {
                Ok(t) => (anchor, t, FitStatus::Affine),
                Err(reason) => {
                    let t = translation_fit(&xs, &ys, &ws)?;
                    (anchor, t, FitStatus::TranslationFallback(reason))
                }
            })
        });

    let mut anchors = Vec::with_capacity(x.len());
    let mut transforms = Vec::with_capacity(x.len());
    let mut statuses = Vec::with_capacity(x.len());
    for fit in fits {
        let (anchor, transform, status) = fit?;
        anchors.push(anchor);
        transforms.push(transform);
        statuses.push(status);
    }
    Ok((LocalAffineSet::new(anchors, transforms)?, statuses))
}

/// Translation-only variant: singleton neighborhoods, `L = I`,
/// `t_i = y_i - x_i`, anchored at the reference points themselves.
pub fn fit_translations(
    x: &[DVector<f64>],
    y_tilde: &[DVector<f64>],
) -> Result<(LocalAffineSet, Vec<FitStatus>)> {
    check_point_lists(x, y_tilde)?;
    let mut anchors = Vec::with_capacity(x.len());
    let mut transforms = Vec::with_capacity(x.len());
    for (xi, yi) in x.iter().zip(y_tilde) {
        anchors.push(xi.clone());
        transforms.push(AffineTransform::pure_translation(yi - xi)?);
    }
    let statuses = vec![FitStatus::Translation; x.len()];
    Ok((LocalAffineSet::new(anchors, transforms)?, statuses))
}
