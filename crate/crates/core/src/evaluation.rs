//! Overlap metrics, registration QC, affine geometric reports and synthetic
//! phantoms for end-to-end testing without clinical data.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fusion::{
    build_svf, integrate_svf, invert_svf, DisplacementField, FusionParams, GridSpec,
};
use crate::linalg::{affine_distances, AffineDistances, AffineTransform};
use crate::matching::LocalAffineSet;
use crate::volume::LabelVolume;

/// Per-label Dice scores with their arithmetic mean, optionally averaged
/// over named label groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_label: BTreeMap<u32, f64>,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_means: Option<BTreeMap<String, f64>>,
}

impl DiceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Aligned-column plain text: one `label dice` row, then the mean and
    /// any group means.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for (label, dice) in &self.per_label {
            let _ = writeln!(out, "{label:>8}  {dice:.6}");
        }
        let _ = writeln!(out, "{:>8}  {:.6}", "mean", self.mean);
        if let Some(groups) = &self.group_means {
            for (name, mean) in groups {
                let _ = writeln!(out, "{name:>8}  {mean:.6}");
            }
        }
        out
    }

    /// Attach group means: for each named group, the mean Dice over its
    /// member labels that appear in `per_label` (no region merging).
    pub fn with_groups(mut self, groups: &BTreeMap<String, Vec<u32>>) -> Self {
        let mut means = BTreeMap::new();
        for (name, members) in groups {
            let values: Vec<f64> = members
                .iter()
                .filter_map(|l| self.per_label.get(l).copied())
                .collect();
            if !values.is_empty() {
                means.insert(name.clone(), values.iter().sum::<f64>() / values.len() as f64);
            }
        }
        self.group_means = Some(means);
        self
    }
}

/// Per-label Dice overlap between two label volumes on the same grid:
/// `2 |A ∩ B| / (|A| + |B|)`. Background 0 is skipped; a label present in
/// only one volume scores 0; `labels`, when given, restricts the report.
pub fn dice(a: &LabelVolume, b: &LabelVolume, labels: Option<&[u32]>) -> Result<DiceReport> {
    if !a.grid().same_geometry(b.grid()) {
        return Err(Error::GridMismatch(
            "dice needs both volumes on one grid".into(),
        ));
    }
    let da = a.data();
    let db = b.data();

    // (intersection, |A|, |B|) per label, accumulated in fixed chunk order.
    let n_chunks = da.len().div_ceil(exec::CHUNK);
    let partials = exec::map_indices(n_chunks, |c| {
        let start = c * exec::CHUNK;
        let end = (start + exec::CHUNK).min(da.len());
        let mut counts: BTreeMap<u32, (u64, u64, u64)> = BTreeMap::new();
        for v in start..end {
            let (la, lb) = (da[v], db[v]);
            if la != 0 {
                counts.entry(la).or_default().1 += 1;
            }
            if lb != 0 {
                counts.entry(lb).or_default().2 += 1;
            }
            if la != 0 && la == lb {
                counts.entry(la).or_default().0 += 1;
            }
        }
        counts
    });
    let mut counts: BTreeMap<u32, (u64, u64, u64)> = BTreeMap::new();
    for partial in partials {
        for (label, (i, na, nb)) in partial {
            let e = counts.entry(label).or_default();
            e.0 += i;
            e.1 += na;
            e.2 += nb;
        }
    }

    let mut per_label = BTreeMap::new();
    for (label, (inter, na, nb)) in counts {
        if let Some(filter) = labels {
            if !filter.contains(&label) {
                continue;
            }
        }
        if na + nb == 0 {
            continue;
        }
        per_label.insert(label, 2.0 * inter as f64 / (na + nb) as f64);
    }
    if per_label.is_empty() {
        return Err(Error::InvalidArgument(
            "no labels to score (both volumes empty or filtered out)".into(),
        ));
    }
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(DiceReport {
        per_label,
        mean,
        group_means: None,
    })
}

/// Registration failure flag: true iff the mean Dice is strictly below the
/// threshold (default 0.34).
pub fn qc_flag(report: &DiceReport, threshold: f64) -> bool {
    report.mean < threshold
}

pub const QC_DEFAULT_THRESHOLD: f64 = 0.34;

/// Geometric distances between two affines; see
/// [`crate::linalg::affine_distances`].
pub fn affine_report(a: &AffineTransform, b: &AffineTransform) -> Result<AffineDistances> {
    affine_distances(a, b)
}

/// Aligned-column rendering of an affine distance record.
pub fn affine_report_text(d: &AffineDistances) -> String {
    format!(
        "{:>12}  {:.6}\n{:>12}  {:.6}\n{:>12}  {:.6}\n{:>12}  {:.6} mm\n",
        "linear", d.linear, "rotation", d.rotation, "stretch", d.stretch, "translation", d.translation
    )
}

/// Ground-truth transformation of a phantom pair.
#[derive(Debug, Clone, PartialEq)]
pub enum PhantomTruth {
    Affine(AffineTransform),
    Field {
        forward: DisplacementField,
        inverse: DisplacementField,
    },
}

/// A synthetic registration pair: a Voronoi-cell labeling inside an
/// ellipsoid, and the same labels pulled through a known transformation.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub reference: LabelVolume,
    pub moving: LabelVolume,
    pub truth: PhantomTruth,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    Affine,
    Polyaffine,
}

fn rotation_axis(theta: f64, axis: usize) -> DMatrix<f64> {
    let (c, s) = (theta.cos(), theta.sin());
    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut m = DMatrix::<f64>::identity(3, 3);
    m[(a, a)] = c;
    m[(a, b)] = -s;
    m[(b, a)] = s;
    m[(b, b)] = c;
    m
}

/// Random affine with rotation <= 0.3 rad, log-scale <= ln(1.3), shear
/// <= 0.2 and translation <= 20 mm, all scaled by `magnitude`.
fn random_affine_capped(rng: &mut ChaCha20Rng, magnitude: f64) -> AffineTransform {
    random_affine_with(rng, magnitude, 0.3, 1.3f64.ln(), 0.2, 20.0)
}

fn random_affine_with(
    rng: &mut ChaCha20Rng,
    magnitude: f64,
    rot_cap: f64,
    logscale_cap: f64,
    shear_cap: f64,
    trans_cap: f64,
) -> AffineTransform {
    let mut rot = DMatrix::<f64>::identity(3, 3);
    for axis in 0..3 {
        rot *= rotation_axis(rng.random_range(-1.0..1.0) * rot_cap * magnitude, axis);
    }
    let scale = DMatrix::from_diagonal(&DVector::from_fn(3, |_, _| {
        (rng.random_range(-1.0..1.0) * logscale_cap * magnitude).exp()
    }));
    let mut shear = DMatrix::<f64>::identity(3, 3);
    for r in 0..3 {
        for c in (r + 1)..3 {
            shear[(r, c)] = rng.random_range(-1.0..1.0) * shear_cap * magnitude;
        }
    }
    let linear = rot * scale * shear;
    let translation = DVector::from_fn(3, |_, _| {
        rng.random_range(-1.0..1.0) * trans_cap * magnitude
    });
    AffineTransform::new(linear, translation).expect("capped draws are valid affines")
}

/// Label of the analytic Voronoi-in-ellipsoid geometry at one world point.
fn voronoi_label_at(x: [f64; 3], sites: &[[f64; 3]], center: &[f64; 3], semi: &[f64; 3]) -> u32 {
    let mut r2 = 0.0;
    for k in 0..3 {
        let d = (x[k] - center[k]) / semi[k];
        r2 += d * d;
    }
    if r2 > 1.0 {
        return 0;
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (s, site) in sites.iter().enumerate() {
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = x[k] - site[k];
            d2 += d * d;
        }
        if d2 < best_d {
            best_d = d2;
            best = s;
        }
    }
    best as u32 + 1
}

/// Rasterize the Voronoi geometry, each voxel center pulled through `map`
/// first (identity for the reference volume, the inverse truth for the
/// moving one).
fn voronoi_labels_mapped(
    grid: &GridSpec,
    sites: &[DVector<f64>],
    center: &[f64; 3],
    semi: &[f64; 3],
    map: impl Fn([f64; 3]) -> [f64; 3] + Sync,
) -> Vec<u32> {
    let dims = [grid.dims()[0], grid.dims()[1], grid.dims()[2]];
    let vtw = crate::fusion::FlatAffine::from_homogeneous(grid.voxel_to_world(), 3);
    let flat_sites: Vec<[f64; 3]> = sites.iter().map(|s| [s[0], s[1], s[2]]).collect();
    exec::map_indices(grid.num_voxels(), |voxel| {
        let i = voxel % dims[0];
        let rest = voxel / dims[0];
        let x = vtw.apply([i as f64, (rest % dims[1]) as f64, (rest / dims[1]) as f64]);
        voronoi_label_at(map(x), &flat_sites, center, semi)
    })
}

fn voronoi_labels(grid: &GridSpec, sites: &[DVector<f64>], center: &[f64; 3], semi: &[f64; 3]) -> Vec<u32> {
    voronoi_labels_mapped(grid, sites, center, semi, |x| x)
}

fn affinely_independent(points: &[DVector<f64>]) -> bool {
    if points.len() < 4 {
        return false;
    }
    let mat = DMatrix::from_fn(points.len() - 1, 3, |r, c| points[r + 1][c] - points[0][c]);
    let svals = mat.svd(false, false).singular_values;
    let smax = svals.iter().cloned().fold(0.0, f64::max);
    let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    svals.len() >= 3 && smin > 1e-6 * smax.max(1e-300)
}

/// Build a deterministic phantom pair on `grid`.
///
/// The reference is a Voronoi labeling of `n_regions` random sites inside a
/// centered ellipsoid; the truth is either one random capped affine or a
/// log-Euclidean fusion of `n_regions` moderate local affines; the moving
/// volume is the reference pulled through the truth's inverse
/// (nearest-neighbor). Site draws that are affinely degenerate or whose
/// transformed content would leave the grid are redrawn, up to 10 attempts.
pub fn make_phantom(
    kind: PhantomKind,
    n_regions: usize,
    grid: &GridSpec,
    magnitude: f64,
    seed: u64,
) -> Result<Phantom> {
    if grid.dim() != 3 {
        return Err(Error::InvalidArgument("phantoms are 3-D".into()));
    }
    if n_regions < 4 {
        return Err(Error::InvalidArgument(
            "phantoms need at least 4 regions in 3-D".into(),
        ));
    }
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(Error::InvalidArgument("magnitude must be in [0, 1]".into()));
    }

    // Content ellipsoid: centered, 0.42 of each half-extent; world extents
    // via the grid affine applied to the index box.
    let dims = grid.dims();
    let lo = grid.voxel_world(&[0, 0, 0]);
    let hi = grid.voxel_world(&[dims[0] - 1, dims[1] - 1, dims[2] - 1]);
    let mut center = [0.0; 3];
    let mut half = [0.0; 3];
    for k in 0..3 {
        center[k] = 0.5 * (lo[k] + hi[k]);
        half[k] = 0.5 * (hi[k] - lo[k]).abs();
    }
    let semi = [0.52 * half[0], 0.52 * half[1], 0.52 * half[2]];

    let mut last_reason = "no attempts made".to_string();
    for attempt in 0..10u64 {
        let mut rng =
            ChaCha20Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));

        // Sites inside the ellipsoid (rejection sampling).
        let mut sites = Vec::with_capacity(n_regions);
        while sites.len() < n_regions {
            let p = DVector::from_fn(3, |k, _| {
                center[k] + rng.random_range(-1.0..1.0) * semi[k]
            });
            let r2: f64 = (0..3).map(|k| ((p[k] - center[k]) / semi[k]).powi(2)).sum();
            if r2 <= 1.0 {
                sites.push(p);
            }
        }

        // Two Lloyd iterations: move each site to its cell's centroid so no
        // region degenerates into a sliver with a noise-dominated centroid.
        let mut relaxed_ok = true;
        for _ in 0..2 {
            let labels = voronoi_labels(grid, &sites, &center, &semi);
            let mut sums = vec![(DVector::<f64>::zeros(3), 0usize); n_regions];
            let dims = [grid.dims()[0], grid.dims()[1], grid.dims()[2]];
            for (voxel, &label) in labels.iter().enumerate() {
                if label == 0 {
                    continue;
                }
                let idx = [
                    voxel % dims[0],
                    (voxel / dims[0]) % dims[1],
                    voxel / (dims[0] * dims[1]),
                ];
                let e = &mut sums[label as usize - 1];
                e.0 += grid.voxel_world(&idx);
                e.1 += 1;
            }
            if sums.iter().any(|(_, count)| *count == 0) {
                relaxed_ok = false;
                break;
            }
            for (s, (sum, count)) in sums.into_iter().enumerate() {
                sites[s] = sum / count as f64;
            }
        }
        if !relaxed_ok {
            last_reason = "a Voronoi cell emptied out during relaxation".into();
            continue;
        }
        if !affinely_independent(&sites) {
            last_reason = "sites affinely degenerate".into();
            continue;
        }

        let truth = match kind {
            PhantomKind::Affine => PhantomTruth::Affine(random_affine_capped(&mut rng, magnitude)),
            PhantomKind::Polyaffine => {
                let transforms: Vec<AffineTransform> = (0..n_regions)
                    .map(|_| random_affine_with(&mut rng, magnitude, 0.15, 1.1f64.ln(), 0.05, 5.0))
                    .collect();
                let locals = LocalAffineSet::new(sites.clone(), transforms)?;
                // Kernel width tied to the mean site spacing: much wider and
                // the fused truth degenerates to a single global affine.
                let volume = 4.0 / 3.0 * std::f64::consts::PI * semi[0] * semi[1] * semi[2];
                let spacing = (volume / n_regions as f64).cbrt();
                let params = FusionParams {
                    sigma: 0.8 * spacing,
                    w_background: 1e-5,
                    downsample: 1,
                    steps: 7,
                };
                let v = build_svf(grid, &locals, &params)?;
                let forward = integrate_svf(&v, params.steps, grid)?;
                let inverse = integrate_svf(&invert_svf(&v), params.steps, grid)?;
                PhantomTruth::Field { forward, inverse }
            }
        };

        // Containment: the transformed content sphere must stay inside the
        // world box, else region clipping biases every downstream check.
        let contained = match &truth {
            PhantomTruth::Affine(a) => {
                let r = semi.iter().cloned().fold(0.0, f64::max); // bounding radius
                let c = a.apply(&DVector::from_column_slice(&center));
                // Operator norm of L: the largest singular value.
                let growth = a
                    .linear()
                    .clone()
                    .svd(false, false)
                    .singular_values
                    .iter()
                    .cloned()
                    .fold(0.0, f64::max);
                (0..3).all(|k| {
                    c[k] - growth * r >= lo[k].min(hi[k]) && c[k] + growth * r <= lo[k].max(hi[k])
                })
            }
            PhantomTruth::Field { inverse, .. } => {
                // Moderate local caps keep displacements small; check the
                // inverse displacement magnitude against the margin.
                let max_u = inverse
                    .vectors()
                    .iter()
                    .fold(0.0f64, |m, &v| m.max(v.abs()));
                let margin = (0..3)
                    .map(|k| half[k] - semi[k])
                    .fold(f64::INFINITY, f64::min);
                max_u < margin
            }
        };
        if !contained {
            last_reason = "transformed content left the grid".into();
            continue;
        }

        let reference = LabelVolume::new(
            grid.clone(),
            voronoi_labels(grid, &sites, &center, &semi),
        )?;
        // The moving volume samples the same analytic geometry through the
        // inverse truth (continuous nearest-neighbor pullback). Re-rounding
        // through the reference raster instead would add a second
        // quantization whose centroid bias swamps sub-voxel recovery checks.
        let moving_data = match &truth {
            PhantomTruth::Affine(a) => {
                let inv = crate::fusion::FlatAffine::from_affine(&a.inverse()?);
                voronoi_labels_mapped(grid, &sites, &center, &semi, |x| inv.apply(x))
            }
            PhantomTruth::Field { inverse, .. } => {
                voronoi_labels_mapped(grid, &sites, &center, &semi, |x| {
                    let u = inverse.sample_world(&x);
                    [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
                })
            }
        };
        let moving = LabelVolume::new(grid.clone(), moving_data)?;

        return Ok(Phantom {
            reference,
            moving,
            truth,
            seed,
        });
    }
    Err(Error::DegenerateConfiguration(format!(
        "phantom construction failed after 10 attempts: {last_reason}"
    )))
}

/// The two-opposing-rotations 2-D scenario: rotations of ±`angle` rad about
/// centers 24 mm apart on an 81x81 1 mm grid, kernel sigma 12 mm. Naive
/// Euclidean averaging folds space between the centers at large angles;
/// log-Euclidean fusion of the same inputs stays diffeomorphic.
pub fn two_rotation_scenario(angle: f64) -> Result<(LocalAffineSet, GridSpec, FusionParams)> {
    let n = 81usize;
    let mut m = DMatrix::<f64>::identity(3, 3);
    for k in 0..2 {
        m[(k, k)] = 1.0;
        m[(k, 2)] = -((n - 1) as f64) / 2.0;
    }
    let grid = GridSpec::new(vec![n, n], m)?;

    let centers = [[-12.0, 0.0], [12.0, 0.0]];
    let mut anchors = Vec::new();
    let mut transforms = Vec::new();
    for (i, c) in centers.iter().enumerate() {
        let theta = if i == 0 { angle } else { -angle };
        let lin = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let cv = DVector::from_column_slice(c);
        let t = &cv - &lin * &cv;
        anchors.push(cv);
        transforms.push(AffineTransform::new(lin, t)?);
    }
    let locals = LocalAffineSet::new(anchors, transforms)?;
    let params = FusionParams {
        sigma: 12.0,
        w_background: 1e-5,
        downsample: 1,
        steps: 7,
    };
    Ok((locals, grid, params))
}
