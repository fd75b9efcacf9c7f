//! Labeled, weighted feature-point sets: centroid extraction from label
//! volumes, label-based pairing, and the centroid CSV format.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec;
use crate::fusion::FlatAffine;
use crate::volume::LabelVolume;

/// How per-region weights are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Every region weighs 1/n.
    Uniform,
    /// Weights proportional to region voxel counts (or as read from file).
    SizeProportional,
}

/// Region-labeled world-mm points with normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointSet {
    dim: usize,
    labels: Vec<u32>,
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
    weight_mode: WeightMode,
}

impl LabeledPointSet {
    /// Build a set; labels must be unique, coordinates finite. `weights`
    /// are raw nonnegative masses and get normalized to sum 1 (uniform mode
    /// ignores them and assigns exactly 1/n).
    pub fn new(
        labels: Vec<u32>,
        points: Vec<DVector<f64>>,
        weights: Option<Vec<f64>>,
        weight_mode: WeightMode,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 || points.len() != n {
            return Err(Error::InvalidArgument(
                "labels and points must be non-empty and of equal length".into(),
            ));
        }
        let dim = points[0].len();
        if !(2..=3).contains(&dim) || points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidArgument(
                "points must all be 2-D or all 3-D".into(),
            ));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("point coordinates must be finite".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &labels {
            if !seen.insert(l) {
                return Err(Error::InvalidArgument(format!("duplicate label {l}")));
            }
        }
        let weights = match (weight_mode, weights) {
            (WeightMode::Uniform, _) => vec![1.0 / n as f64; n],
            (WeightMode::SizeProportional, Some(raw)) => {
                if raw.len() != n {
                    return Err(Error::InvalidArgument(
                        "weights must match the point count".into(),
                    ));
                }
                if raw.iter().any(|&w| !w.is_finite() || w < 0.0) {
                    return Err(Error::InvalidArgument(
                        "weights must be finite and nonnegative".into(),
                    ));
                }
                let sum: f64 = raw.iter().sum();
                if sum <= 0.0 {
                    return Err(Error::InvalidArgument("weights must not all be zero".into()));
                }
                raw.into_iter().map(|w| w / sum).collect()
            }
            (WeightMode::SizeProportional, None) => {
                return Err(Error::InvalidArgument(
                    "size-proportional mode needs explicit weights".into(),
                ))
            }
        };
        Ok(Self {
            dim,
            labels,
            points,
            weights,
            weight_mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_mode(&self) -> WeightMode {
        self.weight_mode
    }

    fn position_of(&self, label: u32) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }
}

/// Index-aligned reference/moving sets over their common labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedPointSets {
    pub reference: LabeledPointSet,
    pub moving: LabeledPointSet,
    pub common_labels: Vec<u32>,
}

/// Per-label accumulation over one raster chunk, in raster order.
fn accumulate_chunk(
    data: &[u32],
    start: usize,
    dims: [usize; 3],
    vtw: &FlatAffine,
    exclude: &std::collections::BTreeSet<u32>,
) -> BTreeMap<u32, ([f64; 3], usize)> {
    let mut acc: BTreeMap<u32, ([f64; 3], usize)> = BTreeMap::new();
    for (offset, &label) in data.iter().enumerate() {
        if label == 0 || exclude.contains(&label) {
            continue;
        }
        let voxel = start + offset;
        let i = voxel % dims[0];
        let rest = voxel / dims[0];
        let w = vtw.apply([i as f64, (rest % dims[1]) as f64, (rest / dims[1]) as f64]);
        let entry = acc.entry(label).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            entry.0[k] += w[k];
        }
        entry.1 += 1;
    }
    acc
}

/// Centroids of every retained label: the mean world position of the voxel
/// centers carrying that label. Label 0 (background) and the `exclude` list
/// are skipped. Accumulation is chunked with a fixed reduction order, so
/// results are deterministic and independent of worker count.
pub fn centroids_from_labels(
    volume: &LabelVolume,
    exclude: &[u32],
    weight_mode: WeightMode,
) -> Result<LabeledPointSet> {
    let grid = volume.grid();
    let dims = [grid.dims()[0], grid.dims()[1], grid.dims()[2]];
    let vtw = FlatAffine::from_homogeneous(grid.voxel_to_world(), 3);
    let exclude: std::collections::BTreeSet<u32> = exclude.iter().copied().collect();

    let data = volume.data();
    let n_chunks = data.len().div_ceil(exec::CHUNK);
    let partials = exec::map_indices(n_chunks, |c| {
        let start = c * exec::CHUNK;
        let end = (start + exec::CHUNK).min(data.len());
        accumulate_chunk(&data[start..end], start, dims, &vtw, &exclude)
    });

    let mut totals: BTreeMap<u32, ([f64; 3], usize)> = BTreeMap::new();
    for partial in partials {
        for (label, (sum, count)) in partial {
            let entry = totals.entry(label).or_insert(([0.0; 3], 0));
            for k in 0..3 {
                entry.0[k] += sum[k];
            }
            entry.1 += count;
        }
    }
    if totals.is_empty() {
        return Err(Error::EmptySegmentation);
    }

    let mut labels = Vec::with_capacity(totals.len());
    let mut points = Vec::with_capacity(totals.len());
    let mut sizes = Vec::with_capacity(totals.len());
    for (label, (sum, count)) in totals {
        labels.push(label);
        points.push(DVector::from_column_slice(&[
            sum[0] / count as f64,
            sum[1] / count as f64,
            sum[2] / count as f64,
        ]));
        sizes.push(count as f64);
    }
    let weights = match weight_mode {
        WeightMode::Uniform => None,
        WeightMode::SizeProportional => Some(sizes),
    };
    LabeledPointSet::new(labels, points, weights, weight_mode)
}

/// Intersect two sets on their labels (ascending), renormalize weights over
/// the intersection, and align entries index-to-index.
///
/// Fails with `InsufficientCorrespondence` below dim+1 common labels and
/// with `DegenerateConfiguration` when the common reference points do not
/// affinely span the space.
pub fn pair_by_label(
    reference: &LabeledPointSet,
    moving: &LabeledPointSet,
) -> Result<PairedPointSets> {
    if reference.dim() != moving.dim() {
        return Err(Error::InvalidArgument(
            "reference and moving sets must share one dimension".into(),
        ));
    }
    let dim = reference.dim();
    let mut common: Vec<u32> = reference
        .labels()
        .iter()
        .copied()
        .filter(|l| moving.position_of(*l).is_some())
        .collect();
    common.sort_unstable();

    if common.len() < dim + 1 {
        return Err(Error::InsufficientCorrespondence {
            found: common.len(),
            needed: dim + 1,
        });
    }

    let pick = |set: &LabeledPointSet| -> Result<LabeledPointSet> {
        let mut labels = Vec::with_capacity(common.len());
        let mut points = Vec::with_capacity(common.len());
        let mut weights = Vec::with_capacity(common.len());
        for &l in &common {
            let idx = set.position_of(l).expect("label in intersection");
            labels.push(l);
            points.push(set.points()[idx].clone());
            weights.push(set.weights()[idx]);
        }
        match set.weight_mode() {
            WeightMode::Uniform => LabeledPointSet::new(labels, points, None, WeightMode::Uniform),
            WeightMode::SizeProportional => {
                LabeledPointSet::new(labels, points, Some(weights), WeightMode::SizeProportional)
            }
        }
    };
    let ref_picked = pick(reference)?;
    let mov_picked = pick(moving)?;

    // Affine-independence of the reference points: the (n-1) x dim matrix of
    // first-point-centered coordinates must have full column rank.
    let pts = ref_picked.points();
    let mat = DMatrix::from_fn(pts.len() - 1, dim, |r, c| pts[r + 1][c] - pts[0][c]);
    let svals = mat.svd(false, false).singular_values;
    let smax = svals.iter().cloned().fold(0.0, f64::max);
    let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    if svals.len() < dim || smin <= 1e-6 * smax.max(1e-300) {
        return Err(Error::DegenerateConfiguration(format!(
            "need {} affinely independent reference points",
            dim + 1
        )));
    }

    Ok(PairedPointSets {
        reference: ref_picked,
        moving: mov_picked,
        common_labels: common,
    })
}

/// Render the centroid CSV: header `label,x,y[,z],weight`, world mm, full
/// f64 round-trip precision.
pub fn pointset_to_csv(set: &LabeledPointSet) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    out.push_str(if set.dim() == 3 {
        "label,x,y,z,weight\n"
    } else {
        "label,x,y,weight\n"
    });
    for i in 0..set.len() {
        let _ = write!(out, "{}", set.labels()[i]);
        for k in 0..set.dim() {
            let _ = write!(out, ",{}", set.points()[i][k]);
        }
        let _ = writeln!(out, ",{}", set.weights()[i]);
    }
    out
}

/// Parse the centroid CSV. A weight column is optional; when present the
/// weights are kept (size-proportional provenance assumed), otherwise the
/// set is uniform.
pub fn pointset_from_csv(text: &str) -> Result<LabeledPointSet> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty centroid CSV".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let (dim, has_weight) = match cols.as_slice() {
        ["label", "x", "y", "z", "weight"] => (3, true),
        ["label", "x", "y", "z"] => (3, false),
        ["label", "x", "y", "weight"] => (2, true),
        ["label", "x", "y"] => (2, false),
        _ => {
            return Err(Error::Parse(format!(
                "unrecognized centroid CSV header `{header}`"
            )))
        }
    };

    let mut labels = Vec::new();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expect = 1 + dim + usize::from(has_weight);
        if fields.len() != expect {
            return Err(Error::Parse(format!(
                "line {}: expected {expect} fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let label: u32 = fields[0]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad label `{}`", lineno + 2, fields[0])))?;
        let mut coords = Vec::with_capacity(dim);
        for k in 0..dim {
            let v: f64 = fields[1 + k].parse().map_err(|_| {
                Error::Parse(format!("line {}: bad coordinate `{}`", lineno + 2, fields[1 + k]))
            })?;
            coords.push(v);
        }
        labels.push(label);
        points.push(DVector::from_column_slice(&coords));
        if has_weight {
            let w: f64 = fields[1 + dim].parse().map_err(|_| {
                Error::Parse(format!("line {}: bad weight `{}`", lineno + 2, fields[1 + dim]))
            })?;
            weights.push(w);
        }
    }
    if has_weight {
        LabeledPointSet::new(labels, points, Some(weights), WeightMode::SizeProportional)
    } else {
        LabeledPointSet::new(labels, points, None, WeightMode::Uniform)
    }
}

pub fn write_pointset_csv(set: &LabeledPointSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, pointset_to_csv(set))?;
    Ok(())
}

pub fn read_pointset_csv(path: impl AsRef<Path>) -> Result<LabeledPointSet> {
    let text = std::fs::read_to_string(path)?;
    pointset_from_csv(&text)
}
