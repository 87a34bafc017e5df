//! Sampled audits of the regularity conditions a field declares: linear
//! growth, path-Lipschitz continuity, and convexity of the uncertainty image.
//!
//! These are falsification checks over finite samples, not proofs — the
//! conditions quantify over infinite sets, so a report can only certify that
//! no violation was found at the sampled points.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::pathspace::{euclidean_norm, DiscretePath, TimeGrid};

use super::{CoefficientError, Prefix, UncertaintySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionId {
    LinearGrowth,
    Lipschitz,
    Convexity,
}

impl std::fmt::Display for ConditionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConditionId::LinearGrowth => write!(f, "linear-growth"),
            ConditionId::Lipschitz => write!(f, "lipschitz"),
            ConditionId::Convexity => write!(f, "convexity"),
        }
    }
}

/// Outcome of one sampled audit. `pass` holds iff the worst sampled violation
/// stays within the declared threshold.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub condition: ConditionId,
    /// Worst sampled ratio (growth, Lipschitz) or hull defect (convexity).
    pub max_violation: f64,
    /// Declared constant or tolerance the violation is compared against.
    pub threshold: f64,
    /// Number of (control, time, path) evaluations inspected.
    pub samples: usize,
    pub pass: bool,
}

/// Sampled paths, probe knots and path pairs shared by the audits.
pub struct AuditSamples {
    pub paths: Vec<DiscretePath>,
    /// Index pairs into `paths` used by the Lipschitz audit.
    pub pairs: Vec<(usize, usize)>,
    /// Knot indices at which fields are probed.
    pub knots: Vec<usize>,
}

impl AuditSamples {
    /// Random-walk paths at the given amplitude, perturbed copies at several
    /// scales, and small constant paths straddling zero (the latter expose
    /// square-root-type drifts).
    pub fn generate(grid: TimeGrid, dim: usize, n_paths: usize, amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = grid.dt();
        let mut paths = Vec::new();
        let mut pairs = Vec::new();

        for _ in 0..n_paths {
            let mut values = vec![0.0; grid.n_knots() * dim];
            for j in 0..dim {
                values[j] = amplitude * (rng.gen::<f64>() * 2.0 - 1.0);
            }
            for i in 1..grid.n_knots() {
                for j in 0..dim {
                    let step = amplitude * dt.sqrt() * (rng.gen::<f64>() * 2.0 - 1.0);
                    values[i * dim + j] = values[(i - 1) * dim + j] + step;
                }
            }
            let base = DiscretePath::new(grid, dim, values).expect("finite sample path");
            let base_idx = paths.len();
            paths.push(base.clone());
            for delta in [1e-2, 1e-4, 1e-6] {
                let shift: Vec<f64> = (0..dim).map(|_| delta * (rng.gen::<f64>() * 2.0 - 1.0)).collect();
                let bumped = DiscretePath::from_fn(grid, dim, |t, out| {
                    let k = grid.index_of(t).expect("knot");
                    for j in 0..dim {
                        out[j] = base.value(k)[j] + shift[j];
                    }
                });
                pairs.push((base_idx, paths.len()));
                paths.push(bumped);
            }
        }

        // constant paths straddling zero at shrinking scales
        for eps in [1e-2, 1e-4, 1e-6] {
            let up = DiscretePath::constant(grid, &vec![eps; dim]);
            let down = DiscretePath::constant(grid, &vec![-eps; dim]);
            let i = paths.len();
            paths.push(up);
            paths.push(down);
            pairs.push((i, i + 1));
        }

        let n = grid.n_steps();
        let knots = vec![0, n / 4, n / 2, 3 * n / 4, n];
        Self { paths, pairs, knots }
    }
}

/// Audits ||b||^2 + tr a <= C (1 + sup_{s<=t} ||omega(s)||^2) against the
/// field's declared growth constant.
pub fn check_linear_growth(
    u: &UncertaintySet,
    samples: &AuditSamples,
) -> Result<ConditionReport, CoefficientError> {
    let declared = u
        .field
        .constants
        .linear_growth
        .ok_or(CoefficientError::MissingConstant("linear_growth"))?;
    let d = u.field.dim();
    let mut worst = 0.0_f64;
    let mut count = 0usize;
    for path in &samples.paths {
        for &k in &samples.knots {
            let t = path.grid().knot(k);
            let prefix = Prefix::of_path(path, k);
            let sup = prefix.sup_norm();
            let denom = 1.0 + sup * sup;
            for (b, a) in u.image_at_prefix(t, prefix)? {
                let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
                let lhs = euclidean_norm(&b).powi(2) + trace;
                worst = worst.max(lhs / denom);
                count += 1;
            }
        }
    }
    Ok(ConditionReport {
        condition: ConditionId::LinearGrowth,
        max_violation: worst,
        threshold: declared,
        samples: count,
        pass: worst <= declared,
    })
}

/// Audits ||b(omega) - b(alpha)|| + ||sigma(omega) - sigma(alpha)||_o
/// <= C sup_{s<=t} ||omega(s) - alpha(s)|| over the sampled path pairs.
/// Pairs with zero sup-distance are excluded.
pub fn check_lipschitz(
    u: &UncertaintySet,
    samples: &AuditSamples,
) -> Result<ConditionReport, CoefficientError> {
    let declared = u
        .field
        .constants
        .lipschitz
        .ok_or(CoefficientError::MissingConstant("lipschitz"))?;
    let d = u.field.dim();
    let r = u.field.noise_dim();
    let mut worst = 0.0_f64;
    let mut count = 0usize;
    let mut b_left = vec![0.0; d];
    let mut b_right = vec![0.0; d];
    let mut s_left = vec![0.0; d * r];
    let mut s_right = vec![0.0; d * r];
    for &(i, j) in &samples.pairs {
        let (omega, alpha) = (&samples.paths[i], &samples.paths[j]);
        for &k in &samples.knots {
            let t = omega.grid().knot(k);
            let dist = omega.sup_distance(alpha, t)?;
            if dist <= 1e-14 {
                continue;
            }
            let p_omega = Prefix::of_path(omega, k);
            let p_alpha = Prefix::of_path(alpha, k);
            for point in u.controls.points() {
                u.field.drift(point, t, p_omega, &mut b_left)?;
                u.field.drift(point, t, p_alpha, &mut b_right)?;
                u.field.diffusion(point, t, p_omega, &mut s_left)?;
                u.field.diffusion(point, t, p_alpha, &mut s_right)?;
                let db: f64 = b_left
                    .iter()
                    .zip(&b_right)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                let diff: Vec<f64> = s_left.iter().zip(&s_right).map(|(x, y)| x - y).collect();
                let ds = operator_norm(&diff, d, r);
                worst = worst.max((db + ds) / dist);
                count += 1;
            }
        }
    }
    Ok(ConditionReport {
        condition: ConditionId::Lipschitz,
        max_violation: worst,
        threshold: declared,
        samples: count,
        pass: worst <= declared,
    })
}

/// Relative tolerance for the convexity defect, scaled by the image diameter.
pub const CONVEXITY_TOL: f64 = 1e-8;

/// Audits convexity of the uncertainty image at the sampled (t, omega).
///
/// For every pair of image points the midpoint value must be attained by the
/// field — either by an existing control or by the control-coordinate
/// midpoint — within `CONVEXITY_TOL` times the image diameter. Affinely
/// parameterized families pass exactly; images with a gap (no control near
/// the midpoint value) or curved images fail.
pub fn check_convexity(
    u: &UncertaintySet,
    samples: &AuditSamples,
) -> Result<ConditionReport, CoefficientError> {
    let d = u.field.dim();
    let mut worst = 0.0_f64;
    let mut count = 0usize;
    for path in &samples.paths {
        for &k in &samples.knots {
            let t = path.grid().knot(k);
            let prefix = Prefix::of_path(path, k);
            let image: Vec<Vec<f64>> = u
                .image_at_prefix(t, prefix)?
                .into_iter()
                .map(|(b, a)| flatten_pair(&b, &a))
                .collect();
            let n = image.len();
            if n < 2 {
                continue;
            }
            let mut diam = 0.0_f64;
            for i in 0..n {
                for j in (i + 1)..n {
                    diam = diam.max(dist(&image[i], &image[j]));
                }
            }
            if diam <= 1e-14 {
                continue;
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    let mid: Vec<f64> = image[i]
                        .iter()
                        .zip(&image[j])
                        .map(|(x, y)| 0.5 * (x + y))
                        .collect();
                    // candidate attainment through the control-coordinate midpoint
                    let ci = u.controls.point(i)?;
                    let cj = u.controls.point(j)?;
                    let mid_control: Vec<f64> =
                        ci.iter().zip(cj).map(|(x, y)| 0.5 * (x + y)).collect();
                    let mut best = f64::INFINITY;
                    let mut b = vec![0.0; d];
                    if u.field.drift(&mid_control, t, prefix, &mut b).is_ok() {
                        if let Ok(a) = u.field.a_matrix(&mid_control, t, prefix) {
                            best = dist(&mid, &flatten_pair(&b, &a));
                        }
                    }
                    for pt in &image {
                        best = best.min(dist(&mid, pt));
                    }
                    worst = worst.max(best / diam);
                    count += 1;
                }
            }
        }
    }
    Ok(ConditionReport {
        condition: ConditionId::Convexity,
        max_violation: worst,
        threshold: CONVEXITY_TOL,
        samples: count,
        pass: worst <= CONVEXITY_TOL,
    })
}

fn flatten_pair(b: &[f64], a: &[f64]) -> Vec<f64> {
    let mut v = b.to_vec();
    v.extend_from_slice(a);
    v
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Spectral norm of a d x r matrix given row-major.
pub fn operator_norm(mat: &[f64], d: usize, r: usize) -> f64 {
    if mat.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let m = DMatrix::from_row_slice(d, r, mat);
    m.svd(false, false).singular_values[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{
        constant_bound, constant_field, interval_field, interval_field_const, CoefficientField,
        ControlSet, DeclaredConstants, DiffusionFn, DriftFn, UncertaintySet,
    };
    use nalgebra::SymmetricEigen;
    use std::sync::Arc;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 16).unwrap()
    }

    fn samples(amplitude: f64) -> AuditSamples {
        AuditSamples::generate(grid(), 1, 6, amplitude, 11)
    }

    fn custom_drift_field(
        drift: Arc<DriftFn>,
        constants: DeclaredConstants,
    ) -> UncertaintySet {
        let diffusion: Arc<DiffusionFn> = Arc::new(|_, _, _, out| {
            out[0] = 1.0;
            Ok(())
        });
        UncertaintySet::new(
            ControlSet::new(vec![vec![0.0]]).unwrap(),
            CoefficientField::new(1, 1, drift, diffusion, constants),
        )
    }

    #[test]
    fn zero_drift_identity_diffusion_passes_growth() {
        let u = constant_field(0.0, 1.0);
        let report = check_linear_growth(&u, &samples(2.0)).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_violation <= 1.0 + 1e-9);
    }

    #[test]
    fn current_value_drift_has_unit_growth_ratio() {
        let drift: Arc<DriftFn> = Arc::new(|_, _, p, out| {
            out[0] = p.current()[0];
            Ok(())
        });
        let u = custom_drift_field(
            drift,
            DeclaredConstants { linear_growth: Some(2.0 + 1e-9), ..Default::default() },
        );
        let report = check_linear_growth(&u, &samples(3.0)).unwrap();
        // ratio = (omega(t)^2 + 1) / (1 + sup^2) <= 2 with the unit diffusion
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn quadratic_drift_fails_growth_under_amplitude_sweep() {
        let drift: Arc<DriftFn> = Arc::new(|_, _, p, out| {
            let x = p.current()[0];
            out[0] = x * x;
            Ok(())
        });
        let u = custom_drift_field(
            drift,
            DeclaredConstants { linear_growth: Some(5.0), ..Default::default() },
        );
        let mut violations = Vec::new();
        for amplitude in [1.0, 4.0, 16.0] {
            let report = check_linear_growth(&u, &samples(amplitude)).unwrap();
            violations.push(report.max_violation);
        }
        // violation grows with amplitude and the sweep detects the failure
        assert!(violations[2] > violations[0]);
        assert!(violations[2] > 5.0);
    }

    #[test]
    fn constant_coefficients_have_zero_lipschitz_ratio() {
        let u = constant_field(0.7, 1.3);
        let report = check_lipschitz(&u, &samples(1.0)).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_violation, 0.0);
    }

    #[test]
    fn current_value_drift_is_one_lipschitz() {
        let drift: Arc<DriftFn> = Arc::new(|_, _, p, out| {
            out[0] = p.current()[0];
            Ok(())
        });
        let u = custom_drift_field(
            drift,
            DeclaredConstants { lipschitz: Some(1.0 + 1e-9), ..Default::default() },
        );
        let report = check_lipschitz(&u, &samples(1.0)).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_violation <= 1.0 + 1e-9);
    }

    #[test]
    fn sqrt_drift_blows_up_the_lipschitz_ratio() {
        let drift: Arc<DriftFn> = Arc::new(|_, _, p, out| {
            let x = p.current()[0];
            out[0] = x.signum() * x.abs().sqrt();
            Ok(())
        });
        let u = custom_drift_field(
            drift,
            DeclaredConstants { lipschitz: Some(10.0), ..Default::default() },
        );
        let report = check_lipschitz(&u, &samples(1.0)).unwrap();
        // the +-eps constant pairs straddling 0 give ratio 1/sqrt(eps) >> 10
        assert!(!report.pass);
        assert!(report.max_violation > 100.0, "{report:?}");
    }

    #[test]
    fn interval_image_is_convex() {
        let u = interval_field_const(-1.0, 1.0, 1.0, 4.0, 3);
        let report = check_convexity(&u, &samples(1.0)).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn state_dependent_interval_image_is_convex() {
        let u = interval_field(
            constant_bound(-1.0),
            Arc::new(|_, p: Prefix<'_>| 1.0 + p.current()[0].abs()),
            constant_bound(0.5),
            Arc::new(|_, p: Prefix<'_>| 1.0 + 0.5 * p.sup_norm()),
            4,
            DeclaredConstants::default(),
        );
        let report = check_convexity(&u, &samples(1.5)).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn two_point_gap_image_fails_convexity() {
        // a step parameterization: controls {0, 1} map to (0, 1) and (0, 4)
        // with nothing attaining the midpoint (0, 2.5)
        let drift: Arc<DriftFn> = Arc::new(|_, _, _, out| {
            out[0] = 0.0;
            Ok(())
        });
        let diffusion: Arc<DiffusionFn> = Arc::new(|f, _, _, out| {
            out[0] = if f[0] < 0.5 { 1.0 } else { 2.0 };
            Ok(())
        });
        let u = UncertaintySet::new(
            ControlSet::new(vec![vec![0.0], vec![1.0]]).unwrap(),
            CoefficientField::new(1, 1, drift, diffusion, DeclaredConstants::default()),
        );
        let report = check_convexity(&u, &samples(1.0)).unwrap();
        assert!(!report.pass, "{report:?}");
        // defect is |2.5 - 4| / diam(image) = 1.5 / 3
        assert!((report.max_violation - 0.5).abs() < 1e-9);
    }

    #[test]
    fn circle_image_fails_convexity() {
        // (b, a) on a circle of radius 1 around (0, 2): midpoints fall inside
        let drift: Arc<DriftFn> = Arc::new(|f, _, _, out| {
            out[0] = (std::f64::consts::TAU * f[0]).cos();
            Ok(())
        });
        let diffusion: Arc<DiffusionFn> = Arc::new(|f, _, _, out| {
            out[0] = (2.0 + (std::f64::consts::TAU * f[0]).sin()).sqrt();
            Ok(())
        });
        let u = UncertaintySet::new(
            ControlSet::new(ControlSet::uniform_grid(0.0, 0.875, 8)).unwrap(),
            CoefficientField::new(1, 1, drift, diffusion, DeclaredConstants::default()),
        );
        let report = check_convexity(&u, &samples(1.0)).unwrap();
        assert!(!report.pass, "{report:?}");
    }

    #[test]
    fn sampled_a_matrices_are_psd() {
        let u = interval_field_const(-1.0, 1.0, 0.5, 4.0, 3);
        let s = samples(2.0);
        for path in &s.paths {
            for &k in &s.knots {
                let t = path.grid().knot(k);
                for (_, a) in u.image_at(t, path).unwrap() {
                    let d = u.field.dim();
                    let m = DMatrix::from_row_slice(d, d, &a);
                    let eig = SymmetricEigen::new(m);
                    assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10));
                }
            }
        }
    }

    #[test]
    fn operator_norm_of_small_matrices() {
        assert_eq!(operator_norm(&[0.0, 0.0], 1, 2), 0.0);
        assert!((operator_norm(&[3.0], 1, 1) - 3.0).abs() < 1e-12);
        // rank-one 2x2
        assert!((operator_norm(&[1.0, 0.0, 0.0, 2.0], 2, 2) - 2.0).abs() < 1e-12);
    }
}
