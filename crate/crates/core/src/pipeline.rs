//! End-to-end registration: pair labeled points, fit the background affine,
//! then (in polyaffine modes) prealign, build neighborhoods, fit locals,
//! fuse into a velocity field, integrate both flows and compose with the
//! background.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    build_svf, compose_full, compose_inverse, integrate_svf, invert_svf, DisplacementField,
    FusionParams, GridSpec,
};
use crate::linalg::AffineTransform;
use crate::matching::{
    delaunay_neighborhoods, fit_affine_wlls, fit_local_affines, fit_translations, prealign,
    FitStatus, LocalAffineSet,
};
use crate::pointset::{pair_by_label, LabeledPointSet};

/// What kind of transformation to estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationMode {
    /// Background affine only.
    Affine,
    /// Full polyaffine: local affine fits fused into a velocity field.
    Polyaffine,
    /// Polyaffine with translation-only local fits.
    Translations,
}

/// Wall-clock milliseconds of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: &'static str,
    pub ms: f64,
}

/// Everything a registration run produces. Affine mode leaves the field
/// and local-fit members empty; polyaffine modes fill them all.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Global affine mapping reference world coords to moving world coords.
    pub background_affine: AffineTransform,
    pub local_affines: Option<LocalAffineSet>,
    /// Forward map `T = A_B ∘ exp(V)` as a displacement field on the output grid.
    pub forward_field: Option<DisplacementField>,
    /// `T^-1 = exp(-V) ∘ A_B^-1` on the same grid.
    pub inverse_field: Option<DisplacementField>,
    /// Per-neighborhood fit outcome (empty in affine mode).
    pub statuses: Vec<FitStatus>,
    pub timings: Vec<StageTiming>,
}

struct StageClock {
    timings: Vec<StageTiming>,
    start: Instant,
}

impl StageClock {
    fn new() -> Self {
        Self {
            timings: Vec::new(),
            start: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage,
            ms: now.duration_since(self.start).as_secs_f64() * 1e3,
        });
        self.start = now;
    }
}

/// Run the full recipe. `out_grid` is the reference-frame grid the fields
/// are emitted on; affine mode ignores it (and it may be `None` there).
pub fn register(
    ref_pts: &LabeledPointSet,
    mov_pts: &LabeledPointSet,
    mode: RegistrationMode,
    params: &FusionParams,
    out_grid: Option<&GridSpec>,
) -> Result<RegistrationResult> {
    params.validate()?;
    let mut clock = StageClock::new();

    let paired = pair_by_label(ref_pts, mov_pts).map_err(|e| e.in_stage("pair"))?;
    let x = paired.reference.points();
    let y = paired.moving.points();
    // Region weights follow the reference set.
    let weights = paired.reference.weights();
    clock.lap("pair");

    let background =
        fit_affine_wlls(x, y, weights).map_err(|e| e.in_stage("background_affine"))?;
    clock.lap("background_affine");

    if mode == RegistrationMode::Affine {
        return Ok(RegistrationResult {
            background_affine: background,
            local_affines: None,
            forward_field: None,
            inverse_field: None,
            statuses: Vec::new(),
            timings: clock.timings,
        });
    }

    let grid = out_grid.ok_or_else(|| {
        Error::InvalidArgument("polyaffine modes need an output grid".into())
    })?;
    if grid.dim() != ref_pts.dim() {
        return Err(Error::InvalidArgument(
            "output grid dimension does not match the point sets".into(),
        ));
    }

    let y_tilde = prealign(y, &background).map_err(|e| e.in_stage("prealign"))?;
    clock.lap("prealign");

    let (locals, statuses) = match mode {
        RegistrationMode::Polyaffine => {
            let graph = delaunay_neighborhoods(x).map_err(|e| e.in_stage("neighborhoods"))?;
            clock.lap("neighborhoods");
            fit_local_affines(&graph, x, &y_tilde, weights)
                .map_err(|e| e.in_stage("local_fits"))?
        }
        RegistrationMode::Translations => {
            clock.lap("neighborhoods");
            fit_translations(x, &y_tilde).map_err(|e| e.in_stage("local_fits"))?
        }
        RegistrationMode::Affine => unreachable!(),
    };
    clock.lap("local_fits");

    let velocity = build_svf(grid, &locals, params).map_err(|e| e.in_stage("svf"))?;
    clock.lap("svf");

    let phi = integrate_svf(&velocity, params.steps, grid).map_err(|e| e.in_stage("integrate"))?;
    let phi_inv = integrate_svf(&invert_svf(&velocity), params.steps, grid)
        .map_err(|e| e.in_stage("integrate"))?;
    clock.lap("integrate");

    let forward = compose_full(&background, &phi).map_err(|e| e.in_stage("compose"))?;
    let inverse = compose_inverse(&background, &phi_inv).map_err(|e| e.in_stage("compose"))?;
    clock.lap("compose");

    Ok(RegistrationResult {
        background_affine: background,
        local_affines: Some(locals),
        forward_field: Some(forward),
        inverse_field: Some(inverse),
        statuses,
        timings: clock.timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{dice, make_phantom, Phantom, PhantomKind};
    use crate::pointset::{centroids_from_labels, WeightMode};
    use crate::volume::{resample_labels, ResampleTransform};
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_set(rng: &mut ChaCha20Rng, n: usize) -> LabeledPointSet {
        let labels: Vec<u32> = (1..=n as u32).collect();
        let points = (0..n)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-30.0..30.0)))
            .collect();
        LabeledPointSet::new(labels, points, None, WeightMode::Uniform).unwrap()
    }

    fn mapped_set(set: &LabeledPointSet, a: &AffineTransform) -> LabeledPointSet {
        LabeledPointSet::new(
            set.labels().to_vec(),
            set.points().iter().map(|p| a.apply(p)).collect(),
            None,
            WeightMode::Uniform,
        )
        .unwrap()
    }

    fn phantom_sets(p: &Phantom) -> (LabeledPointSet, LabeledPointSet) {
        (
            centroids_from_labels(&p.reference, &[], WeightMode::Uniform).unwrap(),
            centroids_from_labels(&p.moving, &[], WeightMode::Uniform).unwrap(),
        )
    }

    #[test]
    fn identical_sets_give_identity_everything() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let pts = random_set(&mut rng, 12);
        let grid = GridSpec::isotropic(vec![24, 24, 24], 2.0).unwrap();
        let result = register(
            &pts,
            &pts,
            RegistrationMode::Polyaffine,
            &FusionParams::default(),
            Some(&grid),
        )
        .unwrap();

        assert!((result.background_affine.linear() - DMatrix::identity(3, 3)).norm() < 1e-10);
        assert!(result.background_affine.translation().norm() < 1e-9);
        for log in result.local_affines.as_ref().unwrap().logs() {
            assert!(log.matrix().norm() < 1e-8);
        }
        let fwd = result.forward_field.unwrap();
        let max_u = fwd.vectors().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max_u < 1e-6, "identity registration moved by {max_u} mm");
    }

    #[test]
    fn affine_mode_recovers_exact_affine() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let pts = random_set(&mut rng, 15);
        let truth = AffineTransform::new(
            DMatrix::from_row_slice(3, 3, &[1.1, 0.08, -0.02, -0.05, 0.95, 0.1, 0.02, 0.0, 1.05]),
            DVector::from_column_slice(&[7.0, -3.0, 2.5]),
        )
        .unwrap();
        let moved = mapped_set(&pts, &truth);
        let result = register(
            &pts,
            &moved,
            RegistrationMode::Affine,
            &FusionParams::default(),
            None,
        )
        .unwrap();
        assert!(result.forward_field.is_none());
        assert!(result.local_affines.is_none());
        assert!((result.background_affine.linear() - truth.linear()).norm() < 1e-8);
        assert!((result.background_affine.translation() - truth.translation()).norm() < 1e-8);
    }

    #[test]
    fn sigma_zero_matches_affine_mode_densely() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let pts = random_set(&mut rng, 10);
        let truth = AffineTransform::new(
            DMatrix::from_row_slice(3, 3, &[1.05, 0.1, 0.0, -0.06, 0.98, 0.04, 0.0, 0.05, 1.02]),
            DVector::from_column_slice(&[4.0, 1.0, -2.0]),
        )
        .unwrap();
        let moved = mapped_set(&pts, &truth);
        let grid = GridSpec::isotropic(vec![20, 20, 20], 2.0).unwrap();
        let params = FusionParams {
            sigma: 0.0,
            ..FusionParams::default()
        };
        let result = register(&pts, &moved, RegistrationMode::Polyaffine, &params, Some(&grid))
            .unwrap();
        let fwd = result.forward_field.unwrap();

        // sigma = 0 collapses to the background affine applied densely.
        let a = &result.background_affine;
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 20, (voxel / 20) % 20, voxel / 400];
            let x = grid.voxel_world(&idx);
            let expected = a.apply(&x) - &x;
            let got = fwd.vector_at(voxel);
            for k in 0..3 {
                assert!((got[k] - expected[k]).abs() < 0.05);
            }
        }
    }

    #[test]
    fn sigma_infinity_matches_log_euclidean_average_affine() {
        let grid = GridSpec::isotropic(vec![48, 48, 48], 1.0).unwrap();
        let p = make_phantom(PhantomKind::Polyaffine, 7, &grid, 0.5, 9).unwrap();
        let (ref_pts, mov_pts) = phantom_sets(&p);
        let params = FusionParams {
            sigma: f64::INFINITY,
            downsample: 2,
            ..FusionParams::default()
        };
        let result = register(
            &ref_pts,
            &mov_pts,
            RegistrationMode::Polyaffine,
            &params,
            Some(&grid),
        )
        .unwrap();

        // Closed form: A_B exp(sum log A_i / (n + w_B)).
        let locals = result.local_affines.as_ref().unwrap();
        let n = locals.len() as f64;
        let mut mean = DMatrix::<f64>::zeros(4, 4);
        for log in locals.logs() {
            mean += log.matrix();
        }
        mean /= n + params.w_background;
        let avg = crate::linalg::mat_exp(&mean).unwrap();
        let avg_affine = AffineTransform::from_homogeneous(&avg).unwrap();
        let closed_form = result.background_affine.compose(&avg_affine).unwrap();

        let fwd = result.forward_field.unwrap();
        let mut worst = 0.0f64;
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 48, (voxel / 48) % 48, voxel / (48 * 48)];
            if idx.iter().any(|&i| !(5..43).contains(&i)) {
                continue;
            }
            let x = grid.voxel_world(&idx);
            let got = fwd.vector_at(voxel);
            let want = closed_form.apply(&x);
            let mut err = 0.0;
            for k in 0..3 {
                let d = x[k] + got[k] - want[k];
                err += d * d;
            }
            worst = worst.max(err.sqrt());
        }
        assert!(worst < 0.05, "sigma=inf deviates from closed form by {worst} mm");
    }

    #[test]
    fn polyaffine_beats_affine_beats_nothing_on_phantom() {
        let grid = GridSpec::isotropic(vec![48, 48, 48], 1.0).unwrap();
        let p = make_phantom(PhantomKind::Polyaffine, 9, &grid, 0.6, 31).unwrap();
        let (ref_pts, mov_pts) = phantom_sets(&p);

        let before = dice(&p.moving, &p.reference, None).unwrap().mean;

        let aff = register(
            &ref_pts,
            &mov_pts,
            RegistrationMode::Affine,
            &FusionParams::default(),
            None,
        )
        .unwrap();
        let aff_resampled = resample_labels(
            &p.moving,
            ResampleTransform::Affine(&aff.background_affine),
            &grid,
        )
        .unwrap();
        let aff_dice = dice(&aff_resampled, &p.reference, None).unwrap().mean;

        let poly = register(
            &ref_pts,
            &mov_pts,
            RegistrationMode::Polyaffine,
            &FusionParams::default(),
            Some(&grid),
        )
        .unwrap();
        let poly_resampled = resample_labels(
            &p.moving,
            ResampleTransform::Dense(poly.forward_field.as_ref().unwrap()),
            &grid,
        )
        .unwrap();
        let poly_dice = dice(&poly_resampled, &p.reference, None).unwrap().mean;

        assert!(
            poly_dice > aff_dice && aff_dice > before,
            "expected polyaffine > affine > none, got {poly_dice:.3} / {aff_dice:.3} / {before:.3}"
        );
    }

    #[test]
    fn forward_and_inverse_fields_cancel() {
        let grid = GridSpec::isotropic(vec![40, 40, 40], 1.0).unwrap();
        let p = make_phantom(PhantomKind::Polyaffine, 6, &grid, 0.5, 17).unwrap();
        let (ref_pts, mov_pts) = phantom_sets(&p);
        let result = register(
            &ref_pts,
            &mov_pts,
            RegistrationMode::Polyaffine,
            &FusionParams::default(),
            Some(&grid),
        )
        .unwrap();
        let fwd = result.forward_field.unwrap();
        let inv = result.inverse_field.unwrap();

        // Phantom-scale LEPT outputs must be diffeomorphic: strictly
        // positive Jacobian determinant at every interior voxel.
        let min_j = crate::fusion::jacobian_determinants(&fwd)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(min_j > 0.0, "forward field folds: min J = {min_j}");

        let mut worst = 0.0f64;
        for voxel in 0..grid.num_voxels() {
            let idx = [voxel % 40, (voxel / 40) % 40, voxel / 1600];
            if idx.iter().any(|&i| !(6..34).contains(&i)) {
                continue;
            }
            let x = grid.voxel_world(&idx);
            let ui = inv.vector_at(voxel);
            let mut y = [0.0; 3];
            for k in 0..3 {
                y[k] = x[k] + ui[k];
            }
            let uf = fwd.sample_world(&y);
            let mut err = 0.0;
            for k in 0..3 {
                let d = y[k] + uf[k] - x[k];
                err += d * d;
            }
            worst = worst.max(err.sqrt());
        }
        assert!(worst < 0.1, "T(T^-1(x)) error {worst} mm");
    }

    #[test]
    fn translations_mode_runs_and_aligns() {
        let grid = GridSpec::isotropic(vec![40, 40, 40], 1.0).unwrap();
        let p = make_phantom(PhantomKind::Polyaffine, 8, &grid, 0.4, 23).unwrap();
        let (ref_pts, mov_pts) = phantom_sets(&p);
        let before = dice(&p.moving, &p.reference, None).unwrap().mean;
        let result = register(
            &ref_pts,
            &mov_pts,
            RegistrationMode::Translations,
            &FusionParams::default(),
            Some(&grid),
        )
        .unwrap();
        assert!(result
            .statuses
            .iter()
            .all(|s| *s == FitStatus::Translation));
        let resampled = resample_labels(
            &p.moving,
            ResampleTransform::Dense(result.forward_field.as_ref().unwrap()),
            &grid,
        )
        .unwrap();
        let after = dice(&resampled, &p.reference, None).unwrap().mean;
        assert!(after > before, "translations mode: {after:.3} vs {before:.3}");
    }

    #[test]
    fn stage_errors_carry_stage_names() {
        let labels = vec![1, 2, 3];
        let points = vec![
            DVector::from_column_slice(&[0.0, 0.0, 0.0]),
            DVector::from_column_slice(&[1.0, 0.0, 0.0]),
            DVector::from_column_slice(&[0.0, 1.0, 0.0]),
        ];
        let set = LabeledPointSet::new(labels, points, None, WeightMode::Uniform).unwrap();
        match register(
            &set,
            &set,
            RegistrationMode::Affine,
            &FusionParams::default(),
            None,
        ) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "pair"),
            other => panic!("expected a staged error, got {other:?}"),
        }
    }

    #[test]
    fn timings_are_recorded_per_stage() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pts = random_set(&mut rng, 8);
        let result = register(
            &pts,
            &pts,
            RegistrationMode::Affine,
            &FusionParams::default(),
            None,
        )
        .unwrap();
        let stages: Vec<_> = result.timings.iter().map(|t| t.stage).collect();
        assert_eq!(stages, vec!["pair", "background_affine"]);
        assert!(result.timings.iter().all(|t| t.ms >= 0.0));
    }
}
