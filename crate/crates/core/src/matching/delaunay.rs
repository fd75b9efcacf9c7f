//! Delaunay triangulation (2-D) / tetrahedralization (3-D) by incremental
//! Bowyer-Watson insertion, reduced to the per-point neighborhood graph.
//!
//! Points are normalized to the unit box (Delaunay structure is invariant
//! under similarity transforms), wrapped in a far-away super-simplex, and
//! inserted in index order. Insertion order is fixed, so the construction is
//! deterministic; near-cospherical ties are broken by treating on-sphere
//! points as outside.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Per-point index sets from the Delaunay structure. `neighborhood(i)`
/// always contains `i` itself plus every directly connected point, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodGraph {
    n: usize,
    neighborhoods: Vec<Vec<usize>>,
}

impl NeighborhoodGraph {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.neighborhoods[i]
    }

    /// Undirected edge list (i < j), sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (i, nb) in self.neighborhoods.iter().enumerate() {
            for &j in nb {
                if j > i {
                    edges.push((i, j));
                }
            }
        }
        edges
    }
}

/// One simplex plus its cached circumsphere.
#[derive(Debug, Clone)]
struct Simplex {
    verts: [usize; 4], // first dim+1 entries used
    center: [f64; 3],
    radius2: f64,
}

fn dist2(a: &[f64; 3], b: &[f64; 3], dim: usize) -> f64 {
    (0..dim).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Circumcenter and squared radius of a simplex, from the linear system
/// 2 (p_i - p_0) . c = |p_i|^2 - |p_0|^2. Returns None when degenerate.
fn circumsphere(pts: &[[f64; 3]], verts: &[usize], dim: usize) -> Option<([f64; 3], f64)> {
    let p0 = &pts[verts[0]];
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    for (row, &v) in verts[1..=dim].iter().enumerate() {
        let p = &pts[v];
        let mut rhs = 0.0;
        for k in 0..dim {
            let d = p[k] - p0[k];
            a[(row, k)] = 2.0 * d;
            rhs += d * (p[k] + p0[k]);
        }
        b[row] = rhs;
    }
    let c = a.lu().solve(&b)?;
    let mut center = [0.0; 3];
    for k in 0..dim {
        center[k] = c[k];
    }
    let radius2 = dist2(&center, p0, dim);
    if radius2.is_finite() {
        Some((center, radius2))
    } else {
        None
    }
}

/// Signed orientation volume of (facet, apex), translated to the apex.
fn orientation(pts: &[[f64; 3]], facet: &[usize], apex: usize, dim: usize) -> f64 {
    let q = &pts[apex];
    match dim {
        2 => {
            let r0 = [pts[facet[0]][0] - q[0], pts[facet[0]][1] - q[1]];
            let r1 = [pts[facet[1]][0] - q[0], pts[facet[1]][1] - q[1]];
            r0[0] * r1[1] - r0[1] * r1[0]
        }
        _ => {
            let mut m = [[0.0f64; 3]; 3];
            for (i, &v) in facet.iter().take(3).enumerate() {
                for k in 0..3 {
                    m[i][k] = pts[v][k] - q[k];
                }
            }
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        }
    }
}

/// Scale of the orientation determinant, for a relative degeneracy tolerance.
fn orientation_scale(pts: &[[f64; 3]], facet: &[usize], apex: usize, dim: usize) -> f64 {
    let q = &pts[apex];
    facet
        .iter()
        .take(dim)
        .map(|&v| dist2(&pts[v], q, dim).sqrt())
        .product()
}

fn sorted_facet(verts: &[usize], skip: usize, dim: usize) -> [usize; 3] {
    let mut f = [usize::MAX; 3];
    let mut k = 0;
    for (idx, &v) in verts.iter().take(dim + 1).enumerate() {
        if idx != skip {
            f[k] = v;
            k += 1;
        }
    }
    f[..dim].sort_unstable();
    f
}

struct Builder {
    dim: usize,
    pts: Vec<[f64; 3]>, // normalized real points then super vertices
    n_real: usize,
    simplices: Vec<Simplex>,
}

impl Builder {
    fn new(dim: usize, pts: Vec<[f64; 3]>, n_real: usize, super_scale: f64) -> Result<Self> {
        let mut pts = pts;
        // Regular super-simplex far outside the unit box.
        let c = 0.5;
        match dim {
            2 => {
                for k in 0..3 {
                    let theta = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                    pts.push([c + super_scale * theta.cos(), c + super_scale * theta.sin(), 0.0]);
                }
            }
            _ => {
                let s = super_scale / 3f64.sqrt();
                for corner in [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
                    pts.push([c + s * corner[0], c + s * corner[1], c + s * corner[2]]);
                }
            }
        }
        let mut verts = [usize::MAX; 4];
        for k in 0..=dim {
            verts[k] = n_real + k;
        }
        let (center, radius2) = circumsphere(&pts, &verts[..=dim], dim)
            .ok_or_else(|| Error::DegenerateConfiguration("super-simplex is degenerate".into()))?;
        Ok(Self {
            dim,
            pts,
            n_real,
            simplices: vec![Simplex {
                verts,
                center,
                radius2,
            }],
        })
    }

    fn insert(&mut self, p: usize) -> Result<()> {
        let dim = self.dim;
        let point = self.pts[p];

        // Simplices whose open circumball contains p; points on the sphere
        // (within a relative tolerance) count as outside.
        let mut bad: Vec<usize> = (0..self.simplices.len())
            .filter(|&s| {
                let sx = &self.simplices[s];
                dist2(&sx.center, &point, dim) < sx.radius2 * (1.0 - 1e-12)
            })
            .collect();

        if bad.is_empty() {
            // Cospherical tie: fall back to the simplices containing p.
            for (s, sx) in self.simplices.iter().enumerate() {
                let inside = (0..=dim).all(|skip| {
                    let facet = sorted_facet(&sx.verts, skip, dim);
                    let o = orientation(&self.pts, &facet[..dim], sx.verts[skip], dim);
                    let op = orientation(&self.pts, &facet[..dim], p, dim);
                    // p on the same side as the opposite vertex (or on the facet).
                    o.signum() * op >= -1e-12 * orientation_scale(&self.pts, &facet[..dim], p, dim)
                });
                if inside {
                    bad.push(s);
                }
            }
        }
        if bad.is_empty() {
            return Err(Error::DegenerateConfiguration(format!(
                "point {p} could not be located in the triangulation"
            )));
        }

        // Cavity boundary: facets of bad simplices occurring exactly once.
        let mut facet_counts: std::collections::BTreeMap<[usize; 3], usize> =
            std::collections::BTreeMap::new();
        for &s in &bad {
            let verts = self.simplices[s].verts;
            for skip in 0..=dim {
                *facet_counts.entry(sorted_facet(&verts, skip, dim)).or_insert(0) += 1;
            }
        }

        // Remove the cavity (descending order keeps indices valid).
        bad.sort_unstable();
        for &s in bad.iter().rev() {
            self.simplices.swap_remove(s);
        }

        for (facet, count) in facet_counts {
            if count != 1 {
                continue;
            }
            let o = orientation(&self.pts, &facet[..dim], p, dim);
            let scale = orientation_scale(&self.pts, &facet[..dim], p, dim);
            if o.abs() <= 1e-12 * scale.max(1e-300) {
                // p lies on the facet plane; the neighbor simplex was already
                // broken, so skip the degenerate sliver.
                continue;
            }
            let mut verts = [usize::MAX; 4];
            verts[..dim].copy_from_slice(&facet[..dim]);
            verts[dim] = p;
            if let Some((center, radius2)) = circumsphere(&self.pts, &verts[..=dim], dim) {
                self.simplices.push(Simplex {
                    verts,
                    center,
                    radius2,
                });
            }
        }
        Ok(())
    }

    /// Real-point simplices, super vertices stripped.
    fn real_simplices(&self) -> Vec<[usize; 4]> {
        self.simplices
            .iter()
            .filter(|s| s.verts.iter().take(self.dim + 1).all(|&v| v < self.n_real))
            .map(|s| s.verts)
            .collect()
    }

    /// Check that no kept simplex clearly violates the empty-circumball
    /// property against the real points.
    fn is_delaunay(&self) -> bool {
        for s in &self.simplices {
            if s.verts.iter().take(self.dim + 1).any(|&v| v >= self.n_real) {
                continue;
            }
            for q in 0..self.n_real {
                if s.verts[..=self.dim].contains(&q) {
                    continue;
                }
                if dist2(&s.center, &self.pts[q], self.dim) < s.radius2 * (1.0 - 1e-9) {
                    return false;
                }
            }
        }
        true
    }
}

/// Build the Delaunay neighborhood graph of `points` (all of dim 2 or 3).
///
/// `neighborhood(i)` is `{i}` plus the endpoints of every Delaunay edge at
/// `i`. Fails on fewer than dim+1 points, coincident points, or fully
/// collinear (2-D) / coplanar (3-D) configurations.
pub fn delaunay_neighborhoods(points: &[DVector<f64>]) -> Result<NeighborhoodGraph> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no points given".into()));
    }
    let dim = points[0].len();
    if !(2..=3).contains(&dim) {
        return Err(Error::InvalidArgument(format!(
            "points must be 2-D or 3-D, got dim {dim}"
        )));
    }
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument(
            "points must share one dimension and be finite".into(),
        ));
    }
    if n < dim + 1 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least {} points, got {n}",
            dim + 1
        )));
    }

    // Normalize to the unit box; similarity transforms preserve the structure.
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in points {
        for k in 0..dim {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let extent = (0..dim).map(|k| hi[k] - lo[k]).fold(0.0f64, f64::max).max(1e-300);
    let normalized: Vec<[f64; 3]> = points
        .iter()
        .map(|p| {
            let mut q = [0.0; 3];
            for k in 0..dim {
                q[k] = (p[k] - lo[k]) / extent;
            }
            q
        })
        .collect();

    for i in 0..n {
        for j in (i + 1)..n {
            if dist2(&normalized[i], &normalized[j], dim) < 1e-24 {
                return Err(Error::DegenerateConfiguration(format!(
                    "points {i} and {j} coincide"
                )));
            }
        }
    }

    // Affine-rank check: centered points must span the space.
    let mat = DMatrix::from_fn(n - 1, dim, |r, c| normalized[r + 1][c] - normalized[0][c]);
    let svals = mat.svd(false, false).singular_values;
    let smax = svals.iter().cloned().fold(0.0, f64::max);
    let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    if svals.len() < dim || smin <= 1e-9 * smax.max(1e-300) {
        return Err(Error::DegenerateConfiguration(if dim == 2 {
            "all points are collinear".into()
        } else {
            "all points are coplanar".into()
        }));
    }

    // Super-simplex hull effects shrink as the scale grows; escalate if the
    // validation sweep finds a violation.
    let mut last_err = None;
    for super_scale in [1e4, 1e6, 1e8] {
        match build_once(dim, &normalized, n, super_scale) {
            Ok(builder) => {
                if builder.is_delaunay() {
                    return graph_from(&builder);
                }
                last_err = Some(Error::DegenerateConfiguration(
                    "triangulation failed validation".into(),
                ));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

fn build_once(dim: usize, normalized: &[[f64; 3]], n: usize, super_scale: f64) -> Result<Builder> {
    let mut builder = Builder::new(dim, normalized.to_vec(), n, super_scale)?;
    for p in 0..n {
        builder.insert(p)?;
    }
    Ok(builder)
}

fn graph_from(builder: &Builder) -> Result<NeighborhoodGraph> {
    let n = builder.n_real;
    let dim = builder.dim;
    let mut sets: Vec<std::collections::BTreeSet<usize>> = (0..n)
        .map(|i| std::collections::BTreeSet::from([i]))
        .collect();
    let mut covered = vec![false; n];
    for verts in builder.real_simplices() {
        for a in 0..=dim {
            covered[verts[a]] = true;
            for b in (a + 1)..=dim {
                sets[verts[a]].insert(verts[b]);
                sets[verts[b]].insert(verts[a]);
            }
        }
    }
    if covered.iter().any(|&c| !c) {
        return Err(Error::DegenerateConfiguration(
            "triangulation does not cover every point".into(),
        ));
    }
    Ok(NeighborhoodGraph {
        n,
        neighborhoods: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
    })
}
