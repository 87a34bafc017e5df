//! Functional derivatives by finite differences (horizontal on the frozen
//! path, vertical through bumps from the evaluation time on), the pointwise
//! generator over the control image, viscosity residuals of Markovian value
//! surfaces, and the nonlinear martingale-problem check.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::coefficients::{CoefficientError, Prefix, UncertaintySet};
use crate::expectation::ValueSurface;
use crate::pathspace::{DiscretePath, PathError, PathPair};
use crate::simulate::{mean_stderr, simulate_map, Policy, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum CalculusError {
    #[error("horizontal derivative at the horizon: use the left-limit variant")]
    HorizontalAtHorizon,
    #[error("residual probe at the terminal boundary is rejected; the terminal condition applies there")]
    TerminalProbe,
    #[error("residual probe too close to the spatial boundary")]
    BoundaryProbe,
    #[error("{label} fails the increasing-convex audit near x = {x}: {what}")]
    NotIcx { label: String, x: f64, what: &'static str },
    #[error("calculus precondition: {0}")]
    Precondition(String),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// A non-anticipative functional F(t, omega) with declared polynomial growth
/// and, when available, hand-computed derivatives to test against.
#[derive(Clone)]
pub struct TestFunctional {
    pub label: String,
    eval: Arc<dyn Fn(f64, &DiscretePath) -> f64 + Send + Sync>,
    /// Polynomial growth declaration (C, q).
    pub growth: Option<(f64, f64)>,
    pub analytic: Option<AnalyticDerivatives>,
}

/// Closed-form derivatives of a test functional at (t, omega).
#[derive(Clone)]
pub struct AnalyticDerivatives {
    pub horizontal: Arc<dyn Fn(f64, &DiscretePath) -> f64 + Send + Sync>,
    pub gradient: Arc<dyn Fn(f64, &DiscretePath) -> Vec<f64> + Send + Sync>,
    pub hessian: Arc<dyn Fn(f64, &DiscretePath) -> Vec<f64> + Send + Sync>,
}

impl TestFunctional {
    pub fn new(
        label: impl Into<String>,
        eval: impl Fn(f64, &DiscretePath) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), eval: Arc::new(eval), growth: None, analytic: None }
    }

    pub fn with_growth(mut self, c: f64, q: f64) -> Self {
        self.growth = Some((c, q));
        self
    }

    pub fn with_analytic(mut self, analytic: AnalyticDerivatives) -> Self {
        self.analytic = Some(analytic);
        self
    }

    pub fn eval(&self, t: f64, omega: &DiscretePath) -> f64 {
        (self.eval)(t, omega)
    }
}

/// Finite-difference derivative bundle at one (t, omega).
#[derive(Debug, Clone, Serialize)]
pub struct FunctionalDerivatives {
    pub horizontal: f64,
    pub gradient: Vec<f64>,
    /// Row-major d x d, symmetrized.
    pub hessian: Vec<f64>,
    pub h_horizontal: f64,
    pub h_vertical: f64,
}

/// Default vertical bump: scales with the path magnitude.
pub fn default_vertical_bump(omega: &DiscretePath) -> f64 {
    let sup = omega.sup_norm(omega.grid().horizon()).unwrap_or(0.0);
    1e-4 * (1.0 + sup)
}

/// Forward difference of F in time on the frozen path:
/// [F(t + h, omega(. ^ t)) - F(t, omega(. ^ t))] / h.
///
/// `h` must move to a later grid knot; at t = T use
/// [`horizontal_derivative_at_horizon`].
pub fn horizontal_derivative(
    f: &TestFunctional,
    t: f64,
    omega: &DiscretePath,
    h: f64,
) -> Result<f64, CalculusError> {
    let grid = omega.grid();
    if grid.index_of(t)? == grid.n_steps() {
        return Err(CalculusError::HorizontalAtHorizon);
    }
    let ahead = grid.index_of(t + h)?;
    let h_exact = grid.knot(ahead) - t;
    let frozen = omega.stop(t)?;
    Ok((f.eval(t + h_exact, &frozen) - f.eval(t, &frozen)) / h_exact)
}

/// Left-limit variant at the horizon: the horizontal derivative evaluated at
/// T - h.
pub fn horizontal_derivative_at_horizon(
    f: &TestFunctional,
    omega: &DiscretePath,
    h: f64,
) -> Result<f64, CalculusError> {
    let t = omega.grid().horizon() - h;
    horizontal_derivative(f, t, omega, h)
}

fn bumped(omega: &DiscretePath, k: usize, component: usize, h: f64) -> DiscretePath {
    let grid = *omega.grid();
    let d = omega.dim();
    DiscretePath::from_fn(grid, d, |t, out| {
        let i = grid.index_of(t).expect("knot");
        out.copy_from_slice(omega.value(i));
        if i >= k {
            out[component] += h;
        }
    })
}

/// Central-difference vertical gradient: bump the path by +-h e_i on [t, T].
pub fn vertical_gradient(
    f: &TestFunctional,
    t: f64,
    omega: &DiscretePath,
    h: f64,
) -> Result<Vec<f64>, CalculusError> {
    let k = omega.grid().index_of(t)?;
    let d = omega.dim();
    let mut grad = vec![0.0; d];
    for i in 0..d {
        let up = f.eval(t, &bumped(omega, k, i, h));
        let down = f.eval(t, &bumped(omega, k, i, -h));
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference vertical Hessian via iterated bumps, symmetrized.
pub fn vertical_hessian(
    f: &TestFunctional,
    t: f64,
    omega: &DiscretePath,
    h: f64,
) -> Result<Vec<f64>, CalculusError> {
    let k = omega.grid().index_of(t)?;
    let d = omega.dim();
    let base = f.eval(t, omega);
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        let up = f.eval(t, &bumped(omega, k, i, h));
        let down = f.eval(t, &bumped(omega, k, i, -h));
        hess[i * d + i] = (up - 2.0 * base + down) / (h * h);
        for j in (i + 1)..d {
            let pp = f.eval(t, &bumped(&bumped(omega, k, i, h), k, j, h));
            let pm = f.eval(t, &bumped(&bumped(omega, k, i, h), k, j, -h));
            let mp = f.eval(t, &bumped(&bumped(omega, k, i, -h), k, j, h));
            let mm = f.eval(t, &bumped(&bumped(omega, k, i, -h), k, j, -h));
            let mixed = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[i * d + j] = mixed;
            hess[j * d + i] = mixed;
        }
    }
    // symmetrization is explicit even though the stencil is already symmetric
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (hess[i * d + j] + hess[j * d + i]);
            hess[i * d + j] = avg;
            hess[j * d + i] = avg;
        }
    }
    Ok(hess)
}

/// All finite-difference derivatives at (t, omega).
pub fn functional_derivatives(
    f: &TestFunctional,
    t: f64,
    omega: &DiscretePath,
    h_horizontal: f64,
    h_vertical: f64,
) -> Result<FunctionalDerivatives, CalculusError> {
    Ok(FunctionalDerivatives {
        horizontal: horizontal_derivative(f, t, omega, h_horizontal)?,
        gradient: vertical_gradient(f, t, omega, h_vertical)?,
        hessian: vertical_hessian(f, t, omega, h_vertical)?,
        h_horizontal,
        h_vertical,
    })
}

/// The pointwise generator: the exact maximum over the finite control image
/// of <gradient, b> + tr[hessian a] / 2.
pub fn generator(
    t: f64,
    omega: &DiscretePath,
    gradient: &[f64],
    hessian: &[f64],
    u: &UncertaintySet,
) -> Result<f64, CalculusError> {
    let k = omega.grid().index_of(t)?;
    generator_at_prefix(t, Prefix::of_path(omega, k), gradient, hessian, u)
}

fn generator_at_prefix(
    t: f64,
    prefix: Prefix<'_>,
    gradient: &[f64],
    hessian: &[f64],
    u: &UncertaintySet,
) -> Result<f64, CalculusError> {
    let d = u.field.dim();
    let mut best = f64::NEG_INFINITY;
    for (b, a) in u.image_at_prefix(t, prefix)? {
        let mut val = 0.0;
        for i in 0..d {
            val += gradient[i] * b[i];
        }
        let mut tr = 0.0;
        for i in 0..d {
            for j in 0..d {
                tr += hessian[i * d + j] * a[j * d + i];
            }
        }
        best = best.max(val + 0.5 * tr);
    }
    Ok(best)
}

/// Residual of a Markovian candidate surface at the grid node nearest (t, x):
/// dv/dt + sup_f { b dv/dx + a/2 d2v/dx2 } by finite differences on the
/// surface's own grid.
///
/// Probes at the terminal time or at the spatial boundary are rejected.
pub fn viscosity_residual(
    surface: &ValueSurface,
    t: f64,
    x: f64,
    u: &UncertaintySet,
) -> Result<f64, CalculusError> {
    let ts = surface.ts();
    let xs = surface.xs();
    let dt = surface.dt();
    let dx = surface.dx();
    let m = ((t - ts[0]) / dt).round() as isize;
    let i = ((x - xs[0]) / dx).round() as isize;
    if m < 0 || m as usize >= ts.len() - 1 {
        return Err(CalculusError::TerminalProbe);
    }
    if i < 1 || i as usize >= xs.len() - 1 {
        return Err(CalculusError::BoundaryProbe);
    }
    let (m, i) = (m as usize, i as usize);
    let v = |mm: usize, ii: usize| surface.node(mm, ii);
    let dvdt = if m == 0 {
        (v(1, i) - v(0, i)) / dt
    } else {
        (v(m + 1, i) - v(m - 1, i)) / (2.0 * dt)
    };
    let slope = (v(m, i + 1) - v(m, i - 1)) / (2.0 * dx);
    let second = (v(m, i + 1) - 2.0 * v(m, i) + v(m, i - 1)) / (dx * dx);
    let mut ham = f64::NEG_INFINITY;
    for point in u.controls.points() {
        let (b, a) = u.field.eval_markov(point, ts[m], &[xs[i]])?;
        ham = ham.max(b[0] * slope + 0.5 * a[0] * second);
    }
    Ok(dvdt + ham)
}

/// Max |residual| over a rectangle of interior probe nodes.
pub fn max_residual(
    surface: &ValueSurface,
    u: &UncertaintySet,
    t_range: (f64, f64),
    x_range: (f64, f64),
    n_probes: usize,
) -> Result<f64, CalculusError> {
    let mut worst = 0.0_f64;
    for a in 0..n_probes {
        for b in 0..n_probes {
            let t = t_range.0 + (t_range.1 - t_range.0) * a as f64 / (n_probes - 1).max(1) as f64;
            let x = x_range.0 + (x_range.1 - x_range.0) * b as f64 / (n_probes - 1).max(1) as f64;
            match viscosity_residual(surface, t, x, u) {
                Ok(r) => worst = worst.max(r.abs()),
                Err(CalculusError::TerminalProbe | CalculusError::BoundaryProbe) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(worst)
}

/// An increasing convex C^2 test function with hand-supplied derivatives.
#[derive(Clone)]
pub struct IcxFunction {
    pub label: String,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    d1: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    d2: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl IcxFunction {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), f: Arc::new(f), d1: Arc::new(d1), d2: Arc::new(d2) }
    }

    pub fn identity() -> Self {
        Self::new("x", |x| x, |_| 1.0, |_| 0.0)
    }

    pub fn square() -> Self {
        Self::new("x^2", |x| x * x, |x| 2.0 * x, |_| 2.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    /// Samples phi' and phi'' on [-range, range] and rejects negative values.
    pub fn audit(&self, range: f64, n: usize) -> Result<(), CalculusError> {
        self.audit_monotone(range, n)?;
        self.audit_convex(range, n)
    }

    pub fn audit_monotone(&self, range: f64, n: usize) -> Result<(), CalculusError> {
        for i in 0..=n {
            let x = -range + 2.0 * range * i as f64 / n as f64;
            if (self.d1)(x) < -1e-12 {
                return Err(CalculusError::NotIcx { label: self.label.clone(), x, what: "phi' < 0" });
            }
        }
        Ok(())
    }

    pub fn audit_convex(&self, range: f64, n: usize) -> Result<(), CalculusError> {
        for i in 0..=n {
            let x = -range + 2.0 * range * i as f64 / n as f64;
            if (self.d2)(x) < -1e-12 {
                return Err(CalculusError::NotIcx { label: self.label.clone(), x, what: "phi'' < 0" });
            }
        }
        Ok(())
    }
}

/// True when every drift in the control image vanishes at a few probe
/// prefixes — the drift term of the generator is then dead and the
/// monotonicity half of the increasing-convex audit is immaterial.
fn drift_is_degenerate(u: &UncertaintySet, start: &PathPair, barrier: f64) -> bool {
    let grid = *start.path().grid();
    let d = u.field.dim();
    let mut b = vec![0.0; d];
    let probes = [0.0, barrier / 2.0, -barrier / 2.0];
    for &x in &probes {
        let path = DiscretePath::constant(grid, &vec![x; d]);
        let prefix = Prefix::of_path(&path, start.knot());
        for point in u.controls.points() {
            if u.field.drift(point, start.t(), prefix, &mut b).is_err() {
                return false;
            }
            if b.iter().any(|v| v.abs() > 1e-12) {
                return false;
            }
        }
    }
    true
}

/// Result of the compensated-increment check
/// E[phi(X_{t ^ rho}) - phi(X_{s ^ rho}) - integral of G] under one policy.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    pub phi: String,
    pub policy: String,
    pub mean: f64,
    pub stderr: f64,
    /// Discretization allowance 0.5 * dt * growth constant.
    pub allowance: f64,
    /// Fraction of paths that hit the barrier.
    pub barrier_fraction: f64,
    /// |mean| <= 3 stderr + allowance (martingale direction, extremal policy).
    pub pass_centered: bool,
    /// mean <= 3 stderr + allowance (supermartingale direction, any policy).
    pub pass_supermartingale: bool,
}

/// Simulates `policy` from `start` to the horizon and estimates the mean of
/// phi(X_{T ^ rho}) - phi(X_{s ^ rho}) - sum over steps of G(r, X, phi) dt,
/// where rho is the first time |X| reaches `barrier` and G is evaluated along
/// the simulated prefix with the engine's control grid.
pub fn martingale_problem_check(
    phi: &IcxFunction,
    barrier: f64,
    start: &PathPair,
    u: &UncertaintySet,
    policy: &Policy,
    cfg: &SimConfig,
) -> Result<MartingaleReport, CalculusError> {
    if u.field.dim() != 1 {
        return Err(CalculusError::Precondition("martingale check requires d = 1".into()));
    }
    if u.controls.product_structure().is_none() {
        return Err(CalculusError::Precondition(
            "martingale check requires a product control set".into(),
        ));
    }
    phi.audit_convex(barrier, 512)?;
    // phi' enters only through the drift term sup phi' b; with a drift image
    // that vanishes identically the monotone half of the audit is vacuous
    if !drift_is_degenerate(u, start, barrier) {
        phi.audit_monotone(barrier, 512)?;
    }

    let grid = *start.path().grid();
    let k0 = start.knot();
    let n = grid.n_steps();
    let dt = grid.dt();
    let d = u.field.dim();
    let results: Vec<(f64, f64)> = simulate_map(start, policy, u, cfg, |path| {
        // first knot at or beyond the barrier, from time zero
        let mut k_rho = n + 1;
        for k in 0..=n {
            if path.value(k)[0].abs() >= barrier {
                k_rho = k;
                break;
            }
        }
        let k_end = n.min(k_rho);
        let k_begin = k0.min(k_rho);
        let mut compensator = 0.0;
        let mut b = vec![0.0; d];
        for k in k_begin..k_end {
            let t = grid.knot(k);
            let prefix = Prefix::of_path(path, k);
            let x = prefix.current()[0];
            let (dphi, ddphi) = ((phi.d1)(x), (phi.d2)(x));
            let mut g = f64::NEG_INFINITY;
            for point in u.controls.points() {
                if u.field.drift(point, t, prefix, &mut b).is_err() {
                    return (f64::NAN, 1.0);
                }
                let a = match u.field.a_matrix(point, t, prefix) {
                    Ok(a) => a[0],
                    Err(_) => return (f64::NAN, 1.0),
                };
                g = g.max(dphi * b[0] + 0.5 * ddphi * a);
            }
            compensator += g * dt;
        }
        let increment = phi.eval(path.value(k_end)[0]) - phi.eval(path.value(k_begin)[0]);
        let hit = if k_rho <= n { 1.0 } else { 0.0 };
        (increment - compensator, hit)
    })?;

    let compensated: Vec<f64> = results.iter().map(|r| r.0).collect();
    if compensated.iter().any(|v| !v.is_finite()) {
        return Err(CalculusError::Precondition(
            "coefficient evaluation failed along a simulated prefix".into(),
        ));
    }
    let hits: f64 = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    let (mean, stderr) = mean_stderr(&compensated);
    let growth = u.field.constants.linear_growth.unwrap_or(1.0);
    let allowance = 0.5 * dt * growth;
    Ok(MartingaleReport {
        phi: phi.label.clone(),
        policy: policy.label.clone(),
        mean,
        stderr,
        allowance,
        barrier_fraction: hits,
        pass_centered: mean.abs() <= 3.0 * stderr + allowance,
        pass_supermartingale: mean <= 3.0 * stderr + allowance,
    })
}

/// A reference functional with hand-computed derivatives and the time at
/// which the convergence sweeps probe it.
pub struct ReferenceProbe {
    pub functional: TestFunctional,
    pub probe_t: f64,
}

/// Cylinder functionals with analytic derivatives for the finite-difference
/// convergence sweeps. Each has nonvanishing higher derivatives at its probe
/// point, so the observed orders are identifiable.
pub fn reference_functionals() -> Vec<ReferenceProbe> {
    let x_at = |t: f64, w: &DiscretePath| w.value_at(t).unwrap()[0];
    let mut probes = Vec::new();

    // (1 + t^2) exp(x(t))
    let f = TestFunctional::new("quad-time-exp", move |t, w| (1.0 + t * t) * x_at(t, w).exp())
        .with_analytic(AnalyticDerivatives {
            horizontal: Arc::new(move |t, w| 2.0 * t * x_at(t, w).exp()),
            gradient: Arc::new(move |t, w| vec![(1.0 + t * t) * x_at(t, w).exp()]),
            hessian: Arc::new(move |t, w| vec![(1.0 + t * t) * x_at(t, w).exp()]),
        })
        .with_growth(8.0, 0.0);
    probes.push(ReferenceProbe { functional: f, probe_t: 0.5 });

    // sin(t + x(t)) + t^3
    let f = TestFunctional::new("sin-mix", move |t, w| (t + x_at(t, w)).sin() + t * t * t)
        .with_analytic(AnalyticDerivatives {
            horizontal: Arc::new(move |t, w| (t + x_at(t, w)).cos() + 3.0 * t * t),
            gradient: Arc::new(move |t, w| vec![(t + x_at(t, w)).cos()]),
            hessian: Arc::new(move |t, w| vec![-(t + x_at(t, w)).sin()]),
        });
    probes.push(ReferenceProbe { functional: f, probe_t: 0.25 });

    // cosh(x(t)) + t^3 x(t)
    let f = TestFunctional::new("cosh-cubic", move |t, w| {
        x_at(t, w).cosh() + t.powi(3) * x_at(t, w)
    })
    .with_analytic(AnalyticDerivatives {
        horizontal: Arc::new(move |t, w| 3.0 * t * t * x_at(t, w)),
        gradient: Arc::new(move |t, w| vec![x_at(t, w).sinh() + t.powi(3)]),
        hessian: Arc::new(move |t, w| vec![x_at(t, w).cosh()]),
    });
    probes.push(ReferenceProbe { functional: f, probe_t: 0.5 });

    // exp(0.8 x(t) + 0.5 x(t ^ 1/4)) (1 + 0.3 sin t), probed after the
    // frozen coordinate at t1 = 1/4
    let f = TestFunctional::new("two-coordinate-exp", move |t, w| {
        (0.8 * x_at(t, w) + 0.5 * x_at(t.min(0.25), w)).exp() * (1.0 + 0.3 * t.sin())
    })
    .with_analytic(AnalyticDerivatives {
        horizontal: Arc::new(move |t, w| {
            (0.8 * x_at(t, w) + 0.5 * x_at(t.min(0.25), w)).exp() * 0.3 * t.cos()
        }),
        gradient: Arc::new(move |t, w| {
            vec![
                0.8 * (0.8 * x_at(t, w) + 0.5 * x_at(t.min(0.25), w)).exp()
                    * (1.0 + 0.3 * t.sin()),
            ]
        }),
        hessian: Arc::new(move |t, w| {
            vec![
                0.64 * (0.8 * x_at(t, w) + 0.5 * x_at(t.min(0.25), w)).exp()
                    * (1.0 + 0.3 * t.sin()),
            ]
        }),
    });
    probes.push(ReferenceProbe { functional: f, probe_t: 0.5 });

    // exp(-x(t)^2) (2 + t + 0.3 t^3)
    let f = TestFunctional::new("gauss-bell", move |t, w| {
        (-x_at(t, w).powi(2)).exp() * (2.0 + t + 0.3 * t.powi(3))
    })
    .with_analytic(AnalyticDerivatives {
        horizontal: Arc::new(move |t, w| (-x_at(t, w).powi(2)).exp() * (1.0 + 0.9 * t * t)),
        gradient: Arc::new(move |t, w| {
            let x = x_at(t, w);
            vec![-2.0 * x * (-x * x).exp() * (2.0 + t + 0.3 * t.powi(3))]
        }),
        hessian: Arc::new(move |t, w| {
            let x = x_at(t, w);
            vec![(4.0 * x * x - 2.0) * (-x * x).exp() * (2.0 + t + 0.3 * t.powi(3))]
        }),
    });
    probes.push(ReferenceProbe { functional: f, probe_t: 0.375 });

    probes
}

/// Finite-difference errors of one derivative kind over a dyadic h sweep.
pub struct DerivativeSweep {
    pub functional: String,
    pub horizontal: Vec<SweepRow>,
    pub gradient: Vec<SweepRow>,
    pub hessian: Vec<SweepRow>,
}

/// Runs the dyadic convergence sweep for one reference functional on the
/// given path: horizontal steps are grid multiples, vertical bumps dyadic.
pub fn derivative_sweep(
    probe: &ReferenceProbe,
    omega: &DiscretePath,
    n_dyadic: usize,
) -> Result<DerivativeSweep, CalculusError> {
    let analytic = probe
        .functional
        .analytic
        .as_ref()
        .ok_or(CalculusError::Precondition("sweep needs analytic derivatives".into()))?;
    let t = probe.probe_t;
    let dt = omega.grid().dt();
    let mut horizontal = Vec::new();
    let mut gradient = Vec::new();
    let mut hessian = Vec::new();
    for lvl in 0..n_dyadic {
        let h = dt * (2 << (n_dyadic - lvl)) as f64 / 2.0;
        let est = horizontal_derivative(&probe.functional, t, omega, h)?;
        let exact = (analytic.horizontal)(t, omega);
        horizontal.push(SweepRow { h, estimate: est, analytic: exact, error: (est - exact).abs() });

        let hv = 0.4 / (1 << lvl) as f64;
        let est = vertical_gradient(&probe.functional, t, omega, hv)?[0];
        let exact = (analytic.gradient)(t, omega)[0];
        gradient.push(SweepRow { h: hv, estimate: est, analytic: exact, error: (est - exact).abs() });

        let est = vertical_hessian(&probe.functional, t, omega, hv)?[0];
        let exact = (analytic.hessian)(t, omega)[0];
        hessian.push(SweepRow { h: hv, estimate: est, analytic: exact, error: (est - exact).abs() });
    }
    Ok(DerivativeSweep {
        functional: probe.functional.label.clone(),
        horizontal,
        gradient,
        hessian,
    })
}

/// One row of a derivative or residual convergence sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub h: f64,
    pub estimate: f64,
    pub analytic: f64,
    pub error: f64,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "h,estimate,analytic,error")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.h, r.estimate, r.analytic, r.error)?;
    }
    Ok(())
}

/// Least-squares slope of log2(error) against log2(h): the observed
/// convergence order of a sweep. Rows with zero error are excluded.
pub fn observed_order(rows: &[SweepRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.error > 0.0)
        .map(|r| (r.h.log2(), r.error.log2()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    sxy / sxx
}
