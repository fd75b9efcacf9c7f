//! Fusing local affine logs into a stationary velocity field and integrating
//! it into a diffeomorphic displacement field.
//!
//! The velocity at a world point x is the weighted average of the local log
//! matrices applied to homogeneous x:
//! `V(x) = [sum_i w_i(x) log(A_i)] / (w_B + sum_i w_i(x)) . x`,
//! with Gaussian kernel weights `w_i(x) = exp(-|x - anchor_i|^2 / (2 sigma^2))`
//! and a uniform background weight `w_B`. Integration runs scaling and
//! squaring: scale by `2^-steps`, then self-compose `steps` times. Negating
//! the field before integration yields the inverse map.
//!
//! Fields store world-mm vectors on a voxel grid, x fastest; all voxel loops
//! are data-parallel over disjoint output slots.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::AffineTransform;
use crate::matching::LocalAffineSet;

/// A voxel grid with its voxel-index-to-world-mm affine.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    dims: Vec<usize>,
    voxel_to_world: DMatrix<f64>,
    world_to_voxel: DMatrix<f64>,
}

impl GridSpec {
    pub fn new(dims: Vec<usize>, voxel_to_world: DMatrix<f64>) -> Result<Self> {
        let dim = dims.len();
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidArgument(format!(
                "grids must be 2-D or 3-D, got {dim} axes"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("grid dims must be >= 1".into()));
        }
        if voxel_to_world.nrows() != dim + 1 || voxel_to_world.ncols() != dim + 1 {
            return Err(Error::InvalidArgument(format!(
                "voxel-to-world must be {0}x{0} for a {dim}-D grid",
                dim + 1
            )));
        }
        let world_to_voxel = voxel_to_world
            .clone()
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::InvalidArgument("voxel-to-world affine is singular".into()))?;
        Ok(Self {
            dims,
            voxel_to_world,
            world_to_voxel,
        })
    }

    /// Axis-aligned grid with isotropic `spacing` (mm) and origin at world 0.
    pub fn isotropic(dims: Vec<usize>, spacing: f64) -> Result<Self> {
        let dim = dims.len();
        let mut m = DMatrix::<f64>::identity(dim + 1, dim + 1);
        for k in 0..dim {
            m[(k, k)] = spacing;
        }
        Self::new(dims, m)
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn voxel_to_world(&self) -> &DMatrix<f64> {
        &self.voxel_to_world
    }

    pub fn world_to_voxel(&self) -> &DMatrix<f64> {
        &self.world_to_voxel
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Same dims and bitwise-equal affine.
    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        self.dims == other.dims && self.voxel_to_world == other.voxel_to_world
    }

    /// Coarser grid covering the same extent: every axis length divided by
    /// `factor` (rounded up), index step scaled accordingly.
    pub fn downsample(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 {
            return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let dim = self.dim();
        let dims: Vec<usize> = self.dims.iter().map(|&d| d.div_ceil(factor)).collect();
        let mut scale = DMatrix::<f64>::identity(dim + 1, dim + 1);
        for k in 0..dim {
            scale[(k, k)] = factor as f64;
        }
        GridSpec::new(dims, &self.voxel_to_world * scale)
    }

    /// World position of the center of voxel (i, j[, k]).
    pub fn voxel_world(&self, idx: &[usize]) -> DVector<f64> {
        let dim = self.dim();
        let mut h = DVector::zeros(dim + 1);
        for k in 0..dim {
            h[k] = idx[k] as f64;
        }
        h[dim] = 1.0;
        let w = &self.voxel_to_world * h;
        w.rows(0, dim).into_owned()
    }

    fn padded_dims(&self) -> [usize; 3] {
        let mut d = [1usize; 3];
        for (k, &v) in self.dims.iter().enumerate() {
            d[k] = v;
        }
        d
    }
}

/// Homogeneous affine flattened for hot loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FlatAffine {
    dim: usize,
    lin: [[f64; 3]; 3],
    t: [f64; 3],
}

impl FlatAffine {
    pub(crate) fn from_homogeneous(m: &DMatrix<f64>, dim: usize) -> Self {
        let mut lin = [[0.0; 3]; 3];
        let mut t = [0.0; 3];
        for r in 0..dim {
            for c in 0..dim {
                lin[r][c] = m[(r, c)];
            }
            t[r] = m[(r, dim)];
        }
        Self { dim, lin, t }
    }

    pub(crate) fn from_affine(a: &AffineTransform) -> Self {
        Self::from_homogeneous(&a.homogeneous(), a.dim())
    }

    #[inline]
    pub(crate) fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for r in 0..self.dim {
            let mut acc = self.t[r];
            for c in 0..self.dim {
                acc += self.lin[r][c] * p[c];
            }
            out[r] = acc;
        }
        out
    }
}

/// A vector-per-voxel raster in world mm; base of both field types.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorRaster {
    grid: GridSpec,
    vectors: Vec<f64>, // nvox * dim, component-minor
}

impl VectorRaster {
    fn new(grid: GridSpec, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != grid.num_voxels() * grid.dim() {
            return Err(Error::InvalidArgument(format!(
                "vector buffer length {} does not match grid ({} voxels x {})",
                vectors.len(),
                grid.num_voxels(),
                grid.dim()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("field has non-finite vectors".into()));
        }
        Ok(Self { grid, vectors })
    }

    fn zeros(grid: GridSpec) -> Self {
        let len = grid.num_voxels() * grid.dim();
        Self {
            grid,
            vectors: vec![0.0; len],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// Vector stored at a linear voxel index.
    pub fn vector_at(&self, linear: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.vectors[linear * d..(linear + 1) * d]
    }

    /// Multilinear sample at a world position; out-of-grid coordinates are
    /// clamped to the nearest edge.
    pub fn sample_world(&self, world: &[f64]) -> [f64; 3] {
        let view = FieldView::of(self);
        let mut p = [0.0; 3];
        p[..world.len().min(3)].copy_from_slice(&world[..world.len().min(3)]);
        view.sample(p)
    }
}

/// Stationary velocity field: world-mm displacement per unit time.
pub type VelocityField = Field<VelocityTag>;
/// Displacement field: u(x) = T(x) - x in world mm at each voxel center x.
pub type DisplacementField = Field<DisplacementTag>;

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTag;
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementTag;

/// Thin typed wrapper so velocities and displacements cannot be mixed up.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<Tag> {
    raster: VectorRaster,
    _tag: std::marker::PhantomData<Tag>,
}

impl<Tag> Field<Tag> {
    pub fn from_vectors(grid: GridSpec, vectors: Vec<f64>) -> Result<Self> {
        Ok(Self {
            raster: VectorRaster::new(grid, vectors)?,
            _tag: std::marker::PhantomData,
        })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            raster: VectorRaster::zeros(grid),
            _tag: std::marker::PhantomData,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        self.raster.grid()
    }

    pub fn vectors(&self) -> &[f64] {
        self.raster.vectors()
    }

    pub fn vector_at(&self, linear: usize) -> &[f64] {
        self.raster.vector_at(linear)
    }

    pub fn sample_world(&self, world: &[f64]) -> [f64; 3] {
        self.raster.sample_world(world)
    }
}

/// Fusion parameters; defaults are sigma 15 mm, background weight 1e-5,
/// grid downsampling 4, 7 integration steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionParams {
    /// Gaussian kernel standard deviation in mm; 0 and +inf are legal limits
    /// (0 collapses to the background transform, +inf to the log-Euclidean
    /// mean of the locals).
    pub sigma: f64,
    /// Uniform background weight in the normalizing denominator.
    pub w_background: f64,
    /// Per-axis grid downsampling for velocity-field assembly.
    pub downsample: usize,
    /// Number of squarings in scaling-and-squaring integration.
    pub steps: u32,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            sigma: 15.0,
            w_background: 1e-5,
            downsample: 4,
            steps: 7,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(Error::InvalidArgument(
                "sigma must be >= 0 (possibly +inf)".into(),
            ));
        }
        if !self.w_background.is_finite() || self.w_background < 0.0 {
            return Err(Error::InvalidArgument(
                "background weight must be finite and >= 0".into(),
            ));
        }
        if self.downsample == 0 {
            return Err(Error::InvalidArgument("downsample must be >= 1".into()));
        }
        Ok(())
    }
}

/// Kernel weights of every anchor at a world point, plus the background
/// weight in the final slot. No normalization happens here; the caller
/// divides by `w_B + sum w_i`.
pub fn weights_at(
    x: &DVector<f64>,
    anchors: &[DVector<f64>],
    sigma: f64,
    w_background: f64,
) -> Vec<f64> {
    let mut w = Vec::with_capacity(anchors.len() + 1);
    for anchor in anchors {
        w.push(kernel_weight(
            (x - anchor).norm_squared(),
            sigma,
        ));
    }
    w.push(w_background);
    w
}

#[inline]
fn kernel_weight(dist2: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else if sigma.is_infinite() {
        1.0
    } else {
        (-0.5 * dist2 / (sigma * sigma)).exp()
    }
}

/// Locals flattened for the per-voxel loops.
struct FlatLocals {
    dim: usize,
    n: usize,
    anchors: Vec<f64>, // n * dim
    logs: Vec<f64>,    // n * dim * (dim+1): top rows of each log matrix
    homos: Vec<FlatAffine>,
}

impl FlatLocals {
    fn new(locals: &LocalAffineSet) -> Self {
        let dim = locals.dim();
        let n = locals.len();
        let mut anchors = Vec::with_capacity(n * dim);
        for a in locals.anchors() {
            anchors.extend(a.iter());
        }
        let mut logs = Vec::with_capacity(n * dim * (dim + 1));
        for log in locals.logs() {
            let m = log.matrix();
            for r in 0..dim {
                for c in 0..=dim {
                    logs.push(m[(r, c)]);
                }
            }
        }
        let homos = locals.transforms().iter().map(FlatAffine::from_affine).collect();
        Self {
            dim,
            n,
            anchors,
            logs,
            homos,
        }
    }

    #[inline]
    fn anchor(&self, i: usize) -> &[f64] {
        &self.anchors[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    fn log_rows(&self, i: usize) -> &[f64] {
        let stride = self.dim * (self.dim + 1);
        &self.logs[i * stride..(i + 1) * stride]
    }
}

#[inline]
fn deindex(linear: usize, dims: &[usize; 3]) -> [usize; 3] {
    let i = linear % dims[0];
    let rest = linear / dims[0];
    [i, rest % dims[1], rest / dims[1]]
}

/// Assemble the velocity field of Eq-style log averaging on `grid`
/// downsampled by `params.downsample` per axis.
///
/// Fails with `IndeterminateWeight` (naming the lowest offending voxel) if
/// the background weight is zero and every kernel underflows somewhere.
pub fn build_svf(
    grid: &GridSpec,
    locals: &LocalAffineSet,
    params: &FusionParams,
) -> Result<VelocityField> {
    params.validate()?;
    if locals.is_empty() {
        return Err(Error::InvalidArgument("no local transforms to fuse".into()));
    }
    if locals.dim() != grid.dim() {
        return Err(Error::InvalidArgument(format!(
            "locals are {}-D but grid is {}-D",
            locals.dim(),
            grid.dim()
        )));
    }

    let work = grid.downsample(params.downsample)?;
    let dim = work.dim();
    let dims = work.padded_dims();
    let vtw = FlatAffine::from_homogeneous(work.voxel_to_world(), dim);
    let flat = FlatLocals::new(locals);
    let sigma = params.sigma;
    let w_bg = params.w_background;

    let mut vectors = vec![0.0f64; work.num_voxels() * dim];
    let bad_voxel = AtomicUsize::new(usize::MAX);

    exec::for_each_chunk_mut(&mut vectors, exec::CHUNK * dim, |offset, chunk| {
        let first_voxel = offset / dim;
        for (slot, out) in chunk.chunks_exact_mut(dim).enumerate() {
            let voxel = first_voxel + slot;
            let idx = deindex(voxel, &dims);
            let x = vtw.apply([idx[0] as f64, idx[1] as f64, idx[2] as f64]);

            let mut denom = w_bg;
            let mut num = [0.0f64; 3];
            for i in 0..flat.n {
                let anchor = flat.anchor(i);
                let mut d2 = 0.0;
                for k in 0..dim {
                    let d = x[k] - anchor[k];
                    d2 += d * d;
                }
                let w = kernel_weight(d2, sigma);
                if w > 0.0 {
                    denom += w;
                    let rows = flat.log_rows(i);
                    for r in 0..dim {
                        let row = &rows[r * (dim + 1)..(r + 1) * (dim + 1)];
                        let mut acc = row[dim];
                        for c in 0..dim {
                            acc += row[c] * x[c];
                        }
                        num[r] += w * acc;
                    }
                }
            }

            if denom == 0.0 {
                bad_voxel.fetch_min(voxel, Ordering::Relaxed);
                continue;
            }
            for r in 0..dim {
                out[r] = num[r] / denom;
            }
        }
    });

    let bad = bad_voxel.load(Ordering::Relaxed);
    if bad != usize::MAX {
        let idx = deindex(bad, &dims);
        return Err(Error::IndeterminateWeight(idx[0], idx[1], idx[2]));
    }
    VelocityField::from_vectors(work, vectors)
}

/// Read-only view of a field for sampling in hot loops.
struct FieldView<'a> {
    dim: usize,
    dims: [usize; 3],
    wtv: FlatAffine,
    data: &'a [f64],
}

impl<'a> FieldView<'a> {
    fn of(raster: &'a VectorRaster) -> Self {
        let grid = raster.grid();
        Self {
            dim: grid.dim(),
            dims: grid.padded_dims(),
            wtv: FlatAffine::from_homogeneous(grid.world_to_voxel(), grid.dim()),
            data: raster.vectors(),
        }
    }

    fn of_field<T>(field: &'a Field<T>) -> Self {
        Self::of(&field.raster)
    }

    /// Multilinear interpolation at a world point, clamped to the grid edge.
    #[inline]
    fn sample(&self, world: [f64; 3]) -> [f64; 3] {
        let dim = self.dim;
        let p = self.wtv.apply(world);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..dim {
            let max = (self.dims[k] - 1) as f64;
            let c = p[k].clamp(0.0, max);
            let b = c.floor().min(max - 1.0).max(0.0);
            base[k] = b as usize;
            frac[k] = if self.dims[k] > 1 { c - b } else { 0.0 };
        }
        let mut out = [0.0f64; 3];
        for corner in 0..(1usize << dim) {
            let mut weight = 1.0;
            let mut idx = [0usize; 3];
            for k in 0..dim {
                if corner & (1 << k) != 0 {
                    weight *= frac[k];
                    idx[k] = (base[k] + 1).min(self.dims[k] - 1);
                } else {
                    weight *= 1.0 - frac[k];
                    idx[k] = base[k];
                }
            }
            if weight == 0.0 {
                continue;
            }
            let linear = idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2]);
            let v = &self.data[linear * dim..(linear + 1) * dim];
            for k in 0..dim {
                out[k] += weight * v[k];
            }
        }
        out
    }
}

/// Integrate `exp(V)` by scaling and squaring; the result is resampled onto
/// `output_grid` (multilinear, clamp-to-edge).
///
/// `steps` counts squarings: the field is scaled by `2^-steps`, then the map
/// `x -> x + u(x)` is composed with itself `steps` times.
pub fn integrate_svf(
    v: &VelocityField,
    steps: u32,
    output_grid: &GridSpec,
) -> Result<DisplacementField> {
    if output_grid.dim() != v.grid().dim() {
        return Err(Error::InvalidArgument(
            "output grid dimension does not match the field".into(),
        ));
    }
    let grid = v.grid().clone();
    let dim = grid.dim();
    let dims = grid.padded_dims();
    let vtw = FlatAffine::from_homogeneous(grid.voxel_to_world(), dim);

    let scale = 2f64.powi(-(steps as i32));
    let mut u: Vec<f64> = v.vectors().iter().map(|&x| x * scale).collect();

    let mut raster = VectorRaster::new(grid.clone(), u.clone())?;
    for step in 0..steps {
        let view = FieldView::of(&raster);
        let diverged = AtomicBool::new(false);
        exec::for_each_chunk_mut(&mut u, exec::CHUNK * dim, |offset, chunk| {
            let first_voxel = offset / dim;
            for (slot, out) in chunk.chunks_exact_mut(dim).enumerate() {
                let voxel = first_voxel + slot;
                let idx = deindex(voxel, &dims);
                let x = vtw.apply([idx[0] as f64, idx[1] as f64, idx[2] as f64]);
                let cur = &view.data[voxel * dim..(voxel + 1) * dim];
                let mut probe = [0.0f64; 3];
                for k in 0..dim {
                    probe[k] = x[k] + cur[k];
                }
                let add = view.sample(probe);
                let mut ok = true;
                for k in 0..dim {
                    let val = cur[k] + add[k];
                    if !val.is_finite() {
                        ok = false;
                    }
                    out[k] = val;
                }
                if !ok {
                    diverged.store(true, Ordering::Relaxed);
                }
            }
        });
        // Clamped interpolation is a convex combination, so iterates stay
        // bounded by max|V| for finite input; this guard only fires if that
        // assumption is ever broken.
        if diverged.load(Ordering::Relaxed) {
            return Err(Error::IntegrationDiverged { step });
        }
        raster.vectors.copy_from_slice(&u);
    }

    if output_grid.same_geometry(&grid) {
        return DisplacementField::from_vectors(grid, u);
    }

    // Final resample onto the requested grid.
    let out_dims = output_grid.padded_dims();
    let out_vtw = FlatAffine::from_homogeneous(output_grid.voxel_to_world(), dim);
    let view = FieldView::of(&raster);
    let mut out = vec![0.0f64; output_grid.num_voxels() * dim];
    exec::for_each_chunk_mut(&mut out, exec::CHUNK * dim, |offset, chunk| {
        let first_voxel = offset / dim;
        for (slot, dst) in chunk.chunks_exact_mut(dim).enumerate() {
            let voxel = first_voxel + slot;
            let idx = deindex(voxel, &out_dims);
            let x = out_vtw.apply([idx[0] as f64, idx[1] as f64, idx[2] as f64]);
            let s = view.sample(x);
            dst[..dim].copy_from_slice(&s[..dim]);
        }
    });
    DisplacementField::from_vectors(output_grid.clone(), out)
}

/// The inverse flow's velocity field: every vector negated.
pub fn invert_svf(v: &VelocityField) -> VelocityField {
    let vectors = v.vectors().iter().map(|&x| -x).collect();
    VelocityField::from_vectors(v.grid().clone(), vectors).expect("negation preserves validity")
}

/// Compose the background affine with the integrated field:
/// `u_out(x) = A(x + u_phi(x)) - x` on phi's grid.
pub fn compose_full(a: &AffineTransform, phi: &DisplacementField) -> Result<DisplacementField> {
    let grid = phi.grid().clone();
    let dim = grid.dim();
    if a.dim() != dim {
        return Err(Error::InvalidArgument(
            "affine dimension does not match the field".into(),
        ));
    }
    let dims = grid.padded_dims();
    let vtw = FlatAffine::from_homogeneous(grid.voxel_to_world(), dim);
    let fa = FlatAffine::from_affine(a);
    let src = phi.vectors();

    let mut out = vec![0.0f64; src.len()];
    exec::for_each_chunk_mut(&mut out, exec::CHUNK * dim, |offset, chunk| {
        let first_voxel = offset / dim;
        for (slot, dst) in chunk.chunks_exact_mut(dim).enumerate() {
            let voxel = first_voxel + slot;
            let idx = deindex(voxel, &dims);
            let x = vtw.apply([idx[0] as f64, idx[1] as f64, idx[2] as f64]);
            let u = &src[voxel * dim..(voxel + 1) * dim];
            let mut y = [0.0f64; 3];
            for k in 0..dim {
                y[k] = x[k] + u[k];
            }
            let mapped = fa.apply(y);
            for k in 0..dim {
                dst[k] = mapped[k] - x[k];
            }
        }
    });
    DisplacementField::from_vectors(grid, out)
}

/// Build the inverse of `A ∘ phi` from the inverse flow:
/// `u_out(x) = phi_inv(A^-1 x) - x`, phi_inv sampled with interpolation.
pub fn compose_inverse(
    a: &AffineTransform,
    phi_inv: &DisplacementField,
) -> Result<DisplacementField> {
    let grid = phi_inv.grid().clone();
    let dim = grid.dim();
    if a.dim() != dim {
        return Err(Error::InvalidArgument(
            "affine dimension does not match the field".into(),
        ));
    }
    let a_inv = a.inverse()?;
    let dims = grid.padded_dims();
    let vtw = FlatAffine::from_homogeneous(grid.voxel_to_world(), dim);
    let fa_inv = FlatAffine::from_affine(&a_inv);
    let view = FieldView::of_field(phi_inv);

    let mut out = vec![0.0f64; phi_inv.vectors().len()];
    exec::for_each_chunk_mut(&mut out, exec::CHUNK * dim, |offset, chunk| {
        let first_voxel = offset / dim;
        for (slot, dst) in chunk.chunks_exact_mut(dim).enumerate() {
            let voxel = first_voxel + slot;
            let idx = deindex(voxel, &dims);
            let x = vtw.apply([idx[0] as f64, idx[1] as f64, idx[2] as f64]);
            let z = fa_inv.apply(x);
            let u = view.sample(z);
            for k in 0..dim {
                dst[k] = z[k] + u[k] - x[k];
            }
        }
    });
    DisplacementField::from_vectors(grid, out)
}

/// Naive Euclidean fusion: weighted average of the affine displacements
/// themselves, no log/exp. Kept as the contrast case to the log-Euclidean
/// route; computed on `grid` as given (no downsampling).
pub fn naive_fuse(
    locals: &LocalAffineSet,
    grid: &GridSpec,
    params: &FusionParams,
) -> Result<DisplacementField> {
    params.validate()?;
    if locals.is_empty() {
        return Err(Error::InvalidArgument("no local transforms to fuse".into()));
    }
    if locals.dim() != grid.dim() {
        return Err(Error::InvalidArgument(format!(
            "locals are {}-D but grid is {}-D",
            locals.dim(),
            grid.dim()
        )));
    }
    let dim = grid.dim();
    let dims = grid.padded_dims();
    let vtw = FlatAffine::from_homogeneous(grid.voxel_to_world(), dim);
    let flat = FlatLocals::new(locals);
    let sigma = params.sigma;
    let w_bg = params.w_background;

    let mut out = vec![0.0f64; grid.num_voxels() * dim];
    let bad_voxel = AtomicUsize::new(usize::MAX);
    exec::for_each_chunk_mut(&mut out, exec::CHUNK * dim, |offset, chunk| {
        let first_voxel = offset / dim;
        for (slot, dst) in chunk.chunks_exact_mut(dim).enumerate() {
            let voxel = first_voxel + slot;
            let idx = deindex(voxel, &dims);
            let x = vtw.apply([idx[0] as f64, idx[1] as f64, idx[2] as f64]);

            let mut denom = w_bg;
            let mut num = [0.0f64; 3];
            for i in 0..flat.n {
                let anchor = flat.anchor(i);
                let mut d2 = 0.0;
                for k in 0..dim {
                    let d = x[k] - anchor[k];
                    d2 += d * d;
                }
                let w = kernel_weight(d2, sigma);
                if w > 0.0 {
                    denom += w;
                    let mapped = flat.homos[i].apply(x);
                    for k in 0..dim {
                        num[k] += w * (mapped[k] - x[k]);
                    }
                }
            }
            if denom == 0.0 {
                bad_voxel.fetch_min(voxel, Ordering::Relaxed);
                continue;
            }
            for k in 0..dim {
                dst[k] = num[k] / denom;
            }
        }
    });
    let bad = bad_voxel.load(Ordering::Relaxed);
    if bad != usize::MAX {
        let idx = deindex(bad, &dims);
        return Err(Error::IndeterminateWeight(idx[0], idx[1], idx[2]));
    }
    DisplacementField::from_vectors(grid.clone(), out)
}

/// Finite-difference Jacobian determinants of `x -> x + u(x)` at every
/// interior voxel (central differences in index space, converted to world
/// derivatives through the grid affine).
pub fn jacobian_determinants(field: &DisplacementField) -> Vec<f64> {
    let grid = field.grid();
    let dim = grid.dim();
    let dims = grid.padded_dims();
    for k in 0..dim {
        if dims[k] < 3 {
            return Vec::new();
        }
    }
    let vtw = FlatAffine::from_homogeneous(grid.voxel_to_world(), dim);
    let data = field.vectors();

    let lin_det = {
        let m = grid.voxel_to_world();
        m.view((0, 0), (dim, dim)).into_owned().determinant()
    };

    let interior: Vec<[usize; 3]> = {
        let mut v = Vec::new();
        for k in (0..dims[2]).take(if dim == 3 { dims[2] } else { 1 }) {
            let krange_ok = dim < 3 || (k >= 1 && k + 1 < dims[2]);
            if !krange_ok {
                continue;
            }
            for j in 1..dims[1] - 1 {
                for i in 1..dims[0] - 1 {
                    v.push([i, j, k]);
                }
            }
        }
        v
    };

    let world_of = |idx: [usize; 3]| vtw.apply([idx[0] as f64, idx[1] as f64, idx[2] as f64]);
    let t_of = |idx: [usize; 3]| {
        let linear = idx[0] + dims[0] * (idx[1] + dims[1] * idx[2]);
        let u = &data[linear * dim..(linear + 1) * dim];
        let x = world_of(idx);
        let mut t = [0.0f64; 3];
        for k in 0..dim {
            t[k] = x[k] + u[k];
        }
        t
    };

    exec::map_indices(interior.len(), |q| {
        let idx = interior[q];
        let mut j_index = [[0.0f64; 3]; 3];
        for axis in 0..dim {
            let mut plus = idx;
            let mut minus = idx;
            plus[axis] += 1;
            minus[axis] -= 1;
            let tp = t_of(plus);
            let tm = t_of(minus);
            for r in 0..dim {
                j_index[r][axis] = 0.5 * (tp[r] - tm[r]);
            }
        }
        let det_index = match dim {
            2 => j_index[0][0] * j_index[1][1] - j_index[0][1] * j_index[1][0],
            _ => {
                j_index[0][0] * (j_index[1][1] * j_index[2][2] - j_index[1][2] * j_index[2][1])
                    - j_index[0][1]
                        * (j_index[1][0] * j_index[2][2] - j_index[1][2] * j_index[2][0])
                    + j_index[0][2]
                        * (j_index[1][0] * j_index[2][1] - j_index[1][1] * j_index[2][0])
            }
        };
        det_index / lin_det
    })
}

/// Discrete harmonic energy `sum |grad u|^2` over interior voxels (central
/// differences in world units); a plain smoothness score.
pub fn harmonic_energy(field: &DisplacementField) -> f64 {
    let grid = field.grid();
    let dim = grid.dim();
    let dims = grid.padded_dims();
    for k in 0..dim {
        if dims[k] < 3 {
            return 0.0;
        }
    }
    let data = field.vectors();
    let spacing: Vec<f64> = (0..dim)
        .map(|k| {
            let m = grid.voxel_to_world();
            (0..dim).map(|r| m[(r, k)] * m[(r, k)]).sum::<f64>().sqrt()
        })
        .collect();

    let mut energy = 0.0;
    let kmax = if dim == 3 { dims[2] - 1 } else { 1 };
    let kmin = if dim == 3 { 1 } else { 0 };
    for k in kmin..kmax {
        for j in 1..dims[1] - 1 {
            for i in 1..dims[0] - 1 {
                for axis in 0..dim {
                    let mut plus = [i, j, k];
                    let mut minus = [i, j, k];
                    plus[axis] += 1;
                    minus[axis] -= 1;
                    let lp = plus[0] + dims[0] * (plus[1] + dims[1] * plus[2]);
                    let lm = minus[0] + dims[0] * (minus[1] + dims[1] * minus[2]);
                    for c in 0..dim {
                        let g = (data[lp * dim + c] - data[lm * dim + c]) / (2.0 * spacing[axis]);
                        energy += g * g;
                    }
                }
            }
        }
    }
    energy
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dv(coords: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(coords)
    }

    fn rotation_z(theta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                theta.cos(),
                -theta.sin(),
                0.0,
                theta.sin(),
                theta.cos(),
                0.0,
                0.0,
                0.0,
                1.0,
            ],
        )
    }

    fn rotation_2d_about(theta: f64, center: &[f64; 2]) -> AffineTransform {
        let lin = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let c = dv(center);
        let t = &c - &lin * &c;
        AffineTransform::new(lin, t).unwrap()
    }

    /// Grid centered on the world origin.
    fn centered_grid(n: usize, spacing: f64, dim: usize) -> GridSpec {
        let mut m = DMatrix::<f64>::identity(dim + 1, dim + 1);
        for k in 0..dim {
            m[(k, k)] = spacing;
            m[(k, dim)] = -spacing * ((n - 1) as f64) / 2.0;
        }
        GridSpec::new(vec![n; dim], m).unwrap()
    }

    fn single_local(a: AffineTransform, anchor: DVector<f64>) -> LocalAffineSet {
        LocalAffineSet::new(vec![anchor], vec![a]).unwrap()
    }

    #[test]
    fn kernel_weight_examples() {
        let anchors = vec![dv(&[0.0, 0.0, 0.0]), dv(&[10.0, 0.0, 0.0])];
        // Peak value at the anchor.
        let w = weights_at(&dv(&[0.0, 0.0, 0.0]), &anchors, 15.0, 1e-5);
        assert_eq!(w.len(), 3);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[2], 1e-5);
        // One-sigma value.
        let w = weights_at(&dv(&[15.0, 0.0, 0.0]), &anchors, 15.0, 1e-5);
        assert_relative_eq!(w[0], (-0.5f64).exp(), epsilon = 1e-15);
        // Forty sigmas out: underflow to zero, background carries the denominator.
        let w = weights_at(&dv(&[600.0, 0.0, 0.0]), &anchors, 15.0, 1e-5);
        assert_eq!(w[0], 0.0);
        assert!(w[1] < 1e-300);
    }

    #[test]
    fn identity_locals_give_zero_velocity() {
        let grid = centered_grid(9, 2.0, 3);
        let locals = LocalAffineSet::new(
            vec![dv(&[0.0, 0.0, 0.0]), dv(&[4.0, 0.0, 0.0])],
            vec![AffineTransform::identity(3), AffineTransform::identity(3)],
        )
        .unwrap();
        let v = build_svf(&grid, &locals, &FusionParams::default()).unwrap();
        assert!(v.vectors().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sigma_zero_gives_zero_velocity() {
        let grid = centered_grid(9, 2.0, 3);
        let a = AffineTransform::new(rotation_z(0.4), dv(&[3.0, -1.0, 2.0])).unwrap();
        let locals = single_local(a, dv(&[0.0, 0.0, 0.0]));
        let params = FusionParams {
            sigma: 0.0,
            ..FusionParams::default()
        };
        let v = build_svf(&grid, &locals, &params).unwrap();
        assert!(v.vectors().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sigma_zero_with_zero_background_is_indeterminate() {
        let grid = centered_grid(5, 1.0, 3);
        let locals = single_local(AffineTransform::identity(3), dv(&[0.0, 0.0, 0.0]));
        let params = FusionParams {
            sigma: 0.0,
            w_background: 0.0,
            downsample: 1,
            steps: 7,
        };
        assert!(matches!(
            build_svf(&grid, &locals, &params),
            Err(Error::IndeterminateWeight(0, 0, 0))
        ));
    }

    #[test]
    fn sigma_infinite_matches_uniform_log_average() {
        let grid = centered_grid(7, 3.0, 3);
        let a1 = AffineTransform::new(rotation_z(0.2), dv(&[2.0, 0.0, -1.0])).unwrap();
        let a2 = AffineTransform::new(rotation_z(-0.1), dv(&[0.0, 1.0, 0.5])).unwrap();
        let locals = LocalAffineSet::new(
            vec![dv(&[-3.0, 0.0, 0.0]), dv(&[3.0, 0.0, 0.0])],
            vec![a1.clone(), a2.clone()],
        )
        .unwrap();
        let params = FusionParams {
            sigma: f64::INFINITY,
            downsample: 1,
            ..FusionParams::default()
        };
        let v = build_svf(&grid, &locals, &params).unwrap();

        let mean = (a1.log().unwrap().matrix() + a2.log().unwrap().matrix())
            / (2.0 + params.w_background);
        for voxel in 0..grid.num_voxels() {
            let idx = [
                voxel % 7,
                (voxel / 7) % 7,
                voxel / 49,
            ];
            let x = grid.voxel_world(&idx);
            let mut xh = DVector::zeros(4);
            xh.rows_mut(0, 3).copy_from(&x);
            xh[3] = 1.0;
            let expected = (&mean * xh).rows(0, 3).into_owned();
            let got = v.vector_at(voxel);
            for k in 0..3 {
                assert!((got[k] - expected[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_velocity_integrates_to_exact_translation() {
        let grid = centered_grid(9, 1.0, 3);
        let c = [1.5f64, -0.75, 0.25];
        let mut vectors = Vec::new();
        for _ in 0..grid.num_voxels() {
            vectors.extend_from_slice(&c);
        }
        let v = VelocityField::from_vectors(grid.clone(), vectors).unwrap();
        let phi = integrate_svf(&v, 7, &grid).unwrap();
        for voxel in 0..grid.num_voxels() {
            let u = phi.vector_at(voxel);
            for k in 0..3 {
                assert!((u[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_field_integrates_to_scaling() {
        // V(x) = ln(2) x integrates to phi(x) = 2x. The first-order
        // initialization u0 = V / 2^s leaves a relative deficit of
        // |ln 2|^2 / 2^{s+1} (the (1 + a/N)^N vs e^a gap), so the error
        // shrinks by half per added step; 1e-3 |x| needs s = 9 here.
        let grid = centered_grid(33, 1.0, 3);
        let ln2 = std::f64::consts::LN_2;
        let mut vectors = vec![0.0; grid.num_voxels() * 3];
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 33, (voxel / 33) % 33, voxel / (33 * 33)];
            let x = grid.voxel_world(&idx);
            for k in 0..3 {
                vectors[voxel * 3 + k] = ln2 * x[k];
            }
        }
        let v = VelocityField::from_vectors(grid.clone(), vectors).unwrap();

        let worst_rel = |steps: u32| -> f64 {
            let phi = integrate_svf(&v, steps, &grid).unwrap();
            let mut worst = 0.0f64;
            for voxel in 0..grid.num_voxels() {
                let idx = [voxel % 33, (voxel / 33) % 33, voxel / (33 * 33)];
                // The doubling map keeps |x| <= 8 inside the +-16 grid; only
                // those trajectories stay clear of clamped edge samples.
                if idx.iter().any(|&i| !(9..24).contains(&i)) {
                    continue;
                }
                let x = grid.voxel_world(&idx);
                let u = phi.vector_at(voxel);
                for k in 0..3 {
                    let err = ((x[k] + u[k]) - 2.0 * x[k]).abs();
                    worst = worst.max(err / x.norm().max(1.0));
                }
            }
            worst
        };

        let e7 = worst_rel(7);
        let e8 = worst_rel(8);
        let e9 = worst_rel(9);
        let predicted = ln2 * ln2 / 2f64.powi(8) * 2.0; // deficit on T(x) = 2x
        assert!(e7 <= 1.1 * predicted, "steps 7: {e7} vs predicted {predicted}");
        assert!(e9 <= 1e-3, "steps 9: {e9}");
        let ratio = e7 / e8;
        assert!((1.7..2.3).contains(&ratio), "first-order rate, got ratio {ratio}");
    }

    #[test]
    fn single_affine_field_integrates_to_that_affine() {
        // V(x) = log(A) x gives phi = A exactly (up to interpolation).
        let grid = centered_grid(64, 1.0, 3);
        let a = AffineTransform::new(rotation_z(0.2), dv(&[5.0, 0.0, 0.0])).unwrap();
        let log = a.log().unwrap();
        let mut vectors = vec![0.0; grid.num_voxels() * 3];
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 64, (voxel / 64) % 64, voxel / (64 * 64)];
            let x = grid.voxel_world(&idx);
            let mut xh = DVector::zeros(4);
            xh.rows_mut(0, 3).copy_from(&x);
            xh[3] = 1.0;
            let vx = (log.matrix() * xh).rows(0, 3).into_owned();
            for k in 0..3 {
                vectors[voxel * 3 + k] = vx[k];
            }
        }
        let v = VelocityField::from_vectors(grid.clone(), vectors).unwrap();
        let phi = integrate_svf(&v, 7, &grid).unwrap();
        let mut worst = 0.0f64;
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 64, (voxel / 64) % 64, voxel / (64 * 64)];
            // Clamp-to-edge sampling contaminates a boundary shell roughly
            // as deep as the displacement magnitude; an 8-voxel margin
            // keeps this transform's trajectories clear of it.
            if idx.iter().any(|&i| !(8..56).contains(&i)) {
                continue;
            }
            let x = grid.voxel_world(&idx);
            let expected = a.apply(&x);
            let u = phi.vector_at(voxel);
            let mut err = 0.0;
            for k in 0..3 {
                let d = (x[k] + u[k]) - expected[k];
                err += d * d;
            }
            worst = worst.max(err.sqrt());
        }
        assert!(worst < 0.05, "interior error {worst} mm");
    }

    #[test]
    fn inversion_is_negation_and_double_inversion_restores() {
        let grid = centered_grid(5, 1.0, 3);
        let mut vectors = vec![0.0; grid.num_voxels() * 3];
        for (i, v) in vectors.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let v = VelocityField::from_vectors(grid, vectors).unwrap();
        let inv = invert_svf(&v);
        for (a, b) in v.vectors().iter().zip(inv.vectors()) {
            assert_eq!(*b, -*a);
        }
        assert_eq!(invert_svf(&inv), v);
    }

    #[test]
    fn forward_and_inverse_compose_to_identity() {
        let grid = centered_grid(48, 1.0, 3);
        let a = AffineTransform::new(rotation_z(0.15), dv(&[3.0, -2.0, 1.0])).unwrap();
        let locals = single_local(a, dv(&[0.0, 0.0, 0.0]));
        let params = FusionParams {
            sigma: 12.0,
            downsample: 1,
            ..FusionParams::default()
        };
        let v = build_svf(&grid, &locals, &params).unwrap();
        let phi = integrate_svf(&v, 7, &grid).unwrap();
        let phi_inv = integrate_svf(&invert_svf(&v), 7, &grid).unwrap();

        let mut worst = 0.0f64;
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 48, (voxel / 48) % 48, voxel / (48 * 48)];
            if idx.iter().any(|&i| !(5..43).contains(&i)) {
                continue;
            }
            let x = grid.voxel_world(&idx);
            let u_inv = phi_inv.vector_at(voxel);
            let mut y = [0.0; 3];
            for k in 0..3 {
                y[k] = x[k] + u_inv[k];
            }
            let u_fwd = phi.sample_world(&y);
            let mut err = 0.0;
            for k in 0..3 {
                let d = y[k] + u_fwd[k] - x[k];
                err += d * d;
            }
            worst = worst.max(err.sqrt());
        }
        assert!(worst < 0.1, "inverse-consistency error {worst} mm");
    }

    #[test]
    fn compose_full_identity_cases() {
        let grid = centered_grid(7, 2.0, 3);
        let a = AffineTransform::new(rotation_z(0.3), dv(&[1.0, 2.0, -1.0])).unwrap();

        // Identity field: u(x) = A(x) - x.
        let phi = DisplacementField::zeros(grid.clone());
        let composed = compose_full(&a, &phi).unwrap();
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 7, (voxel / 7) % 7, voxel / 49];
            let x = grid.voxel_world(&idx);
            let expected = a.apply(&x) - &x;
            let got = composed.vector_at(voxel);
            for k in 0..3 {
                assert!((got[k] - expected[k]).abs() < 1e-12);
            }
        }

        // Identity affine: field reproduced.
        let composed = compose_full(&AffineTransform::identity(3), &composed).unwrap();
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 7, (voxel / 7) % 7, voxel / 49];
            let x = grid.voxel_world(&idx);
            let expected = a.apply(&x) - &x;
            let got = composed.vector_at(voxel);
            for k in 0..3 {
                assert!((got[k] - expected[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composed_map_matches_affine_product() {
        // Single-affine SVF composed with background B matches B ∘ A.
        let grid = centered_grid(48, 1.0, 3);
        let a = AffineTransform::new(rotation_z(0.2), dv(&[5.0, 0.0, 0.0])).unwrap();
        let b = AffineTransform::new(rotation_z(-0.1), dv(&[0.0, 3.0, 1.0])).unwrap();
        let locals = single_local(a.clone(), dv(&[0.0, 0.0, 0.0]));
        let params = FusionParams {
            sigma: f64::INFINITY,
            w_background: 0.0,
            downsample: 1,
            steps: 7,
        };
        let v = build_svf(&grid, &locals, &params).unwrap();
        let phi = integrate_svf(&v, 7, &grid).unwrap();
        let composed = compose_full(&b, &phi).unwrap();
        let expected = b.compose(&a).unwrap();

        let mut worst = 0.0f64;
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 48, (voxel / 48) % 48, voxel / (48 * 48)];
            if idx.iter().any(|&i| !(8..40).contains(&i)) {
                continue;
            }
            let x = grid.voxel_world(&idx);
            let u = composed.vector_at(voxel);
            let want = expected.apply(&x);
            let mut err = 0.0;
            for k in 0..3 {
                let d = x[k] + u[k] - want[k];
                err += d * d;
            }
            worst = worst.max(err.sqrt());
        }
        assert!(worst < 0.05, "composition error {worst} mm");
    }

    #[test]
    fn naive_fusion_of_one_affine_matches_lept_near_anchor() {
        let grid = centered_grid(17, 1.0, 2);
        let a = rotation_2d_about(0.3, &[0.0, 0.0]);
        let locals = single_local(a, dv(&[0.0, 0.0]));
        let params = FusionParams {
            sigma: 8.0,
            downsample: 1,
            ..FusionParams::default()
        };
        let naive = naive_fuse(&locals, &grid, &params).unwrap();
        let v = build_svf(&grid, &locals, &params).unwrap();
        let lept = integrate_svf(&v, 7, &grid).unwrap();

        // Near the anchor the kernel weight is ~1 and both routes agree.
        let center = 8 + 17 * 8;
        let un = naive.vector_at(center);
        let ul = lept.vector_at(center);
        for k in 0..2 {
            assert!((un[k] - ul[k]).abs() < 0.02, "{} vs {}", un[k], ul[k]);
        }
    }

    #[test]
    fn opposing_rotations_fold_naive_but_not_lept() {
        let grid = centered_grid(81, 1.0, 2);
        let a1 = rotation_2d_about(2.5, &[-12.0, 0.0]);
        let a2 = rotation_2d_about(-2.5, &[12.0, 0.0]);
        let locals = LocalAffineSet::new(
            vec![dv(&[-12.0, 0.0]), dv(&[12.0, 0.0])],
            vec![a1, a2],
        )
        .unwrap();
        let params = FusionParams {
            sigma: 12.0,
            downsample: 1,
            ..FusionParams::default()
        };

        let naive = naive_fuse(&locals, &grid, &params).unwrap();
        let naive_min = jacobian_determinants(&naive)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(naive_min < 0.0, "naive fusion should fold, min J = {naive_min}");

        let v = build_svf(&grid, &locals, &params).unwrap();
        let lept = integrate_svf(&v, 7, &grid).unwrap();
        let lept_min = jacobian_determinants(&lept)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(lept_min > 0.0, "log-Euclidean fusion must stay diffeomorphic, min J = {lept_min}");
    }

    #[test]
    fn downsampled_field_stays_close_to_full_resolution() {
        let grid = centered_grid(64, 1.0, 3);
        let a1 = AffineTransform::new(rotation_z(0.1), dv(&[2.0, 1.0, 0.0])).unwrap();
        let a2 = AffineTransform::new(rotation_z(-0.08), dv(&[-1.0, 2.0, 1.0])).unwrap();
        let locals = LocalAffineSet::new(
            vec![dv(&[-10.0, 0.0, 0.0]), dv(&[10.0, 5.0, 0.0])],
            vec![a1, a2],
        )
        .unwrap();

        let full = FusionParams {
            downsample: 1,
            ..FusionParams::default()
        };
        let coarse = FusionParams {
            downsample: 4,
            ..FusionParams::default()
        };
        let phi_full = integrate_svf(&build_svf(&grid, &locals, &full).unwrap(), 7, &grid).unwrap();
        let phi_coarse =
            integrate_svf(&build_svf(&grid, &locals, &coarse).unwrap(), 7, &grid).unwrap();

        let mut worst = 0.0f64;
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 64, (voxel / 64) % 64, voxel / (64 * 64)];
            if idx.iter().any(|&i| !(7..58).contains(&i)) {
                continue;
            }
            let uf = phi_full.vector_at(voxel);
            let uc = phi_coarse.vector_at(voxel);
            let mut err = 0.0;
            for k in 0..3 {
                let d = uf[k] - uc[k];
                err += d * d;
            }
            worst = worst.max(err.sqrt());
        }
        assert!(worst < 0.2, "downsampling error {worst} mm");
    }

    #[test]
    fn smoothness_is_monotone_in_sigma() {
        let grid = centered_grid(48, 1.0, 3);
        let a1 = AffineTransform::new(rotation_z(0.15), dv(&[3.0, 0.0, 0.0])).unwrap();
        let a2 = AffineTransform::new(rotation_z(-0.12), dv(&[0.0, -2.0, 1.0])).unwrap();
        let a3 = AffineTransform::pure_translation(dv(&[0.0, 4.0, -2.0])).unwrap();
        let locals = LocalAffineSet::new(
            vec![dv(&[-10.0, -5.0, 0.0]), dv(&[10.0, -5.0, 0.0]), dv(&[0.0, 10.0, 5.0])],
            vec![a1, a2, a3],
        )
        .unwrap();

        let mut energies = Vec::new();
        for sigma in [5.0, 10.0, 15.0, 20.0, 30.0] {
            let params = FusionParams {
                sigma,
                downsample: 1,
                ..FusionParams::default()
            };
            let phi = integrate_svf(&build_svf(&grid, &locals, &params).unwrap(), 7, &grid).unwrap();
            energies.push(harmonic_energy(&phi));
        }
        for pair in energies.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-9),
                "harmonic energy must not increase with sigma: {energies:?}"
            );
        }
    }

    #[test]
    fn world_frame_shift_equivariance() {
        // Shift grid, anchors and transforms by v: values at corresponding
        // voxels are identical (exact in real arithmetic).
        let grid = centered_grid(15, 1.0, 3);
        let a = AffineTransform::new(rotation_z(0.2), dv(&[2.0, -1.0, 0.5])).unwrap();
        let anchor = dv(&[1.0, 2.0, -3.0]);
        let locals = single_local(a.clone(), anchor.clone());
        let params = FusionParams {
            sigma: 10.0,
            downsample: 1,
            ..FusionParams::default()
        };
        let v0 = build_svf(&grid, &locals, &params).unwrap();

        let shift = dv(&[32.0, -16.0, 8.0]);
        let mut vtw = grid.voxel_to_world().clone();
        for k in 0..3 {
            vtw[(k, 3)] += shift[k];
        }
        let grid_shifted = GridSpec::new(grid.dims().to_vec(), vtw).unwrap();
        let tau = AffineTransform::pure_translation(shift.clone()).unwrap();
        let tau_inv = tau.inverse().unwrap();
        let a_shifted = tau.compose(&a).unwrap().compose(&tau_inv).unwrap();
        let locals_shifted = single_local(a_shifted, &anchor + &shift);
        let v1 = build_svf(&grid_shifted, &locals_shifted, &params).unwrap();

        for (x, y) in v0.vectors().iter().zip(v1.vectors()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

}
