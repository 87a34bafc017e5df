//! Coefficient fields over a compact control space: the drift b(f, t, omega)
//! and diffusion factor sigma(f, t, omega) with a = sigma sigma*, the finite
//! discretization of the control space, and the pointwise uncertainty image
//! {(b, a)(f) : f in F}.
//!
//! Evaluators receive a [`Prefix`] — a read-only view of the path up to the
//! current knot — so they are non-anticipative by construction.

mod conditions;

pub use conditions::{
    check_convexity, check_linear_growth, check_lipschitz, AuditSamples, ConditionId,
    ConditionReport,
};

use std::sync::Arc;

use thiserror::Error;

use crate::pathspace::{DiscretePath, PathError, TimeGrid};

#[derive(Debug, Error)]
pub enum CoefficientError {
    #[error("coefficient evaluation failed{}: {message}", control_suffix(.control))]
    Eval {
        message: String,
        control: Option<Vec<f64>>,
    },
    #[error("control index {index} out of range (set has {len} points)")]
    ControlIndex { index: usize, len: usize },
    #[error("control set is not a product of drift and volatility factors")]
    NotProduct,
    #[error("declared constant `{0}` is missing")]
    MissingConstant(&'static str),
    #[error("empty control set")]
    EmptyControlSet,
    #[error(transparent)]
    Path(#[from] PathError),
}

fn control_suffix(control: &Option<Vec<f64>>) -> String {
    match control {
        Some(c) => format!(" at control {c:?}"),
        None => String::new(),
    }
}

/// Read-only view of a path up to (and including) knot `k`.
///
/// This is the only path access an evaluator gets, which enforces
/// non-anticipativity: values after the current knot do not exist here.
#[derive(Clone, Copy)]
pub struct Prefix<'a> {
    grid: &'a TimeGrid,
    values: &'a [f64],
    dim: usize,
    k: usize,
}

impl<'a> Prefix<'a> {
    pub fn new(grid: &'a TimeGrid, values: &'a [f64], dim: usize, k: usize) -> Self {
        debug_assert!(values.len() >= (k + 1) * dim);
        Self { grid, values, dim, k }
    }

    /// View of a whole path at knot `k`.
    pub fn of_path(path: &'a DiscretePath, k: usize) -> Self {
        Self::new(path.grid(), path.values(), path.dim(), k)
    }

    pub fn grid(&self) -> &TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Current knot index.
    pub fn knot(&self) -> usize {
        self.k
    }

    /// Current time.
    pub fn t(&self) -> f64 {
        self.grid.knot(self.k)
    }

    /// Value at knot `i <= k`.
    pub fn value(&self, i: usize) -> &[f64] {
        assert!(i <= self.k, "prefix read beyond current knot");
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Value at the current knot.
    pub fn current(&self) -> &[f64] {
        self.value(self.k)
    }

    /// Running sup of the Euclidean norm over the prefix.
    pub fn sup_norm(&self) -> f64 {
        let mut best = 0.0_f64;
        for i in 0..=self.k {
            best = best.max(crate::pathspace::euclidean_norm(self.value(i)));
        }
        best
    }

    /// Trapezoid-rule integral of kernel(s) * x_j(s) over [(t - window) v 0, t].
    ///
    /// A window end that falls between knots is handled by linear
    /// interpolation of the integrand on the partial cell.
    pub fn windowed_integral(&self, window: f64, component: usize, kernel: impl Fn(f64) -> f64) -> f64 {
        let t = self.t();
        let lo = (t - window).max(self.grid.t0());
        if lo >= t {
            return 0.0;
        }
        let dt = self.grid.dt();
        let f = |i: usize| kernel(self.grid.knot(i)) * self.value(i)[component];
        // first knot strictly above lo
        let lo_pos = (lo - self.grid.t0()) / dt;
        let first = lo_pos.ceil() as usize;
        let mut acc = 0.0;
        // partial cell [lo, knot(first)]
        if first > 0 {
            let frac = first as f64 - lo_pos;
            if frac > 1e-12 {
                let a = first - 1;
                let theta = 1.0 - frac; // position of lo inside the cell
                let f_lo = f(a) * (1.0 - theta) + f(first.min(self.k)) * theta;
                let width = frac * dt;
                acc += 0.5 * (f_lo + f(first.min(self.k))) * width;
            }
        }
        for i in first..self.k {
            acc += 0.5 * (f(i) + f(i + 1)) * dt;
        }
        acc
    }
}

/// Finite discretization of the compact control space F.
///
/// Each control point is a coordinate vector. When the space factors as
/// F0 x F1 (drift controls x volatility controls), the flat list is the
/// cartesian product with index `i0 * n1 + i1` and concatenated coordinates.
#[derive(Debug, Clone)]
pub struct ControlSet {
    points: Vec<Vec<f64>>,
    product: Option<ProductControls>,
}

#[derive(Debug, Clone)]
pub struct ProductControls {
    pub drift: Vec<Vec<f64>>,
    pub vol: Vec<Vec<f64>>,
}

impl ControlSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, CoefficientError> {
        if points.is_empty() {
            return Err(CoefficientError::EmptyControlSet);
        }
        Ok(Self { points, product: None })
    }

    /// Cartesian product of drift and volatility factors.
    pub fn product(drift: Vec<Vec<f64>>, vol: Vec<Vec<f64>>) -> Result<Self, CoefficientError> {
        if drift.is_empty() || vol.is_empty() {
            return Err(CoefficientError::EmptyControlSet);
        }
        let mut points = Vec::with_capacity(drift.len() * vol.len());
        for d in &drift {
            for v in &vol {
                let mut p = d.clone();
                p.extend_from_slice(v);
                points.push(p);
            }
        }
        Ok(Self {
            points,
            product: Some(ProductControls { drift, vol }),
        })
    }

    /// Uniform grid of n scalar controls on [lo, hi] (singleton when n = 1).
    pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
        if n <= 1 {
            return vec![vec![0.5 * (lo + hi)]];
        }
        (0..n)
            .map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Result<&[f64], CoefficientError> {
        self.points
            .get(i)
            .map(Vec::as_slice)
            .ok_or(CoefficientError::ControlIndex { index: i, len: self.points.len() })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn product_structure(&self) -> Option<&ProductControls> {
        self.product.as_ref()
    }

    /// Flat index of the product pair (i0, i1).
    pub fn flat_index(&self, i0: usize, i1: usize) -> Result<usize, CoefficientError> {
        let p = self.product.as_ref().ok_or(CoefficientError::NotProduct)?;
        if i0 >= p.drift.len() || i1 >= p.vol.len() {
            return Err(CoefficientError::ControlIndex {
                index: i0 * p.vol.len() + i1,
                len: self.points.len(),
            });
        }
        Ok(i0 * p.vol.len() + i1)
    }
}

/// Regularity constants the user declares for a field; audited, not proved.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeclaredConstants {
    /// C such that ||b||^2 + tr a <= C (1 + sup ||omega||^2).
    pub linear_growth: Option<f64>,
    /// C such that ||b(omega)-b(alpha)|| + ||sigma(omega)-sigma(alpha)||_o <= C sup ||omega-alpha||.
    pub lipschitz: Option<f64>,
    /// Uniform bound on ||b|| + ||sigma||_o, when the field is globally bounded.
    pub bound: Option<f64>,
}

pub type DriftFn =
    dyn Fn(&[f64], f64, Prefix<'_>, &mut [f64]) -> Result<(), CoefficientError> + Send + Sync;
pub type DiffusionFn =
    dyn Fn(&[f64], f64, Prefix<'_>, &mut [f64]) -> Result<(), CoefficientError> + Send + Sync;

/// The pair (b, sigma) over (control, time, path prefix), with a = sigma sigma*.
///
/// `sigma` is supplied directly rather than derived from `a`, so the
/// factorization is the user's choice and `a` is positive semidefinite by
/// construction.
#[derive(Clone)]
pub struct CoefficientField {
    dim: usize,
    noise_dim: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    pub constants: DeclaredConstants,
}

impl CoefficientField {
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift: Arc<DriftFn>,
        diffusion: Arc<DiffusionFn>,
        constants: DeclaredConstants,
    ) -> Self {
        Self { dim, noise_dim, drift, diffusion, constants }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Drift vector, written into `out` (length `dim`).
    pub fn drift(
        &self,
        control: &[f64],
        t: f64,
        prefix: Prefix<'_>,
        out: &mut [f64],
    ) -> Result<(), CoefficientError> {
        debug_assert_eq!(out.len(), self.dim);
        (self.drift)(control, t, prefix, out)
    }

    /// Diffusion factor sigma, written into `out` row-major (dim x noise_dim).
    pub fn diffusion(
        &self,
        control: &[f64],
        t: f64,
        prefix: Prefix<'_>,
        out: &mut [f64],
    ) -> Result<(), CoefficientError> {
        debug_assert_eq!(out.len(), self.dim * self.noise_dim);
        (self.diffusion)(control, t, prefix, out)
    }

    /// The diffusion density a = sigma sigma*, row-major dim x dim.
    pub fn a_matrix(
        &self,
        control: &[f64],
        t: f64,
        prefix: Prefix<'_>,
    ) -> Result<Vec<f64>, CoefficientError> {
        let (d, r) = (self.dim, self.noise_dim);
        let mut sigma = vec![0.0; d * r];
        self.diffusion(control, t, prefix, &mut sigma)?;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += sigma[i * r + k] * sigma[j * r + k];
                }
                a[i * d + j] = acc;
            }
        }
        Ok(a)
    }

    /// Evaluates (b, a) at a Markovian point (t, x) through a synthetic
    /// two-knot prefix that is constant equal to `x`.
    ///
    /// Only meaningful for fields that read the path through its current
    /// value; delay-type fields see a frozen history here.
    pub fn eval_markov(
        &self,
        control: &[f64],
        t: f64,
        x: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), CoefficientError> {
        debug_assert_eq!(x.len(), self.dim);
        let (grid, k) = if t > 0.0 {
            (TimeGrid::new(0.0, t, 1)?, 1)
        } else {
            (TimeGrid::new(0.0, 1.0, 1)?, 0)
        };
        let mut values = x.to_vec();
        values.extend_from_slice(x);
        let prefix = Prefix::new(&grid, &values, self.dim, k);
        let mut b = vec![0.0; self.dim];
        self.drift(control, t, prefix, &mut b)?;
        let a = self.a_matrix(control, t, prefix)?;
        Ok((b, a))
    }
}

/// A coefficient field together with the finite control discretization; the
/// uncertainty image at (t, omega) is the evaluated set {(b, a)(f) : f}.
#[derive(Clone)]
pub struct UncertaintySet {
    pub controls: Arc<ControlSet>,
    pub field: Arc<CoefficientField>,
}

impl UncertaintySet {
    pub fn new(controls: ControlSet, field: CoefficientField) -> Self {
        Self {
            controls: Arc::new(controls),
            field: Arc::new(field),
        }
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// The uncertainty image at (t, omega): one (b, a) pair per control point.
    ///
    /// Evaluation failures carry the offending control's coordinates.
    pub fn image_at(
        &self,
        t: f64,
        omega: &DiscretePath,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>, CoefficientError> {
        let k = omega.grid().index_of(t)?;
        let prefix = Prefix::of_path(omega, k);
        self.image_at_prefix(t, prefix)
    }

    pub fn image_at_prefix(
        &self,
        t: f64,
        prefix: Prefix<'_>,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>, CoefficientError> {
        let d = self.field.dim();
        let mut out = Vec::with_capacity(self.controls.len());
        for point in self.controls.points() {
            let mut b = vec![0.0; d];
            let tag = |e: CoefficientError| match e {
                CoefficientError::Eval { message, control: None } => CoefficientError::Eval {
                    message,
                    control: Some(point.clone()),
                },
                other => other,
            };
            self.field.drift(point, t, prefix, &mut b).map_err(tag)?;
            let a = self.field.a_matrix(point, t, prefix).map_err(tag)?;
            out.push((b, a));
        }
        Ok(out)
    }
}

fn eval_err(message: impl Into<String>) -> CoefficientError {
    CoefficientError::Eval { message: message.into(), control: None }
}

/// Scalar path functional of (t, prefix), used for interval bounds.
pub type BoundFn = Arc<dyn Fn(f64, Prefix<'_>) -> f64 + Send + Sync>;

pub fn constant_bound(c: f64) -> BoundFn {
    Arc::new(move |_, _| c)
}

/// One-dimensional field with a constant drift and volatility; the control
/// set is a singleton.
pub fn constant_field(b: f64, sigma: f64) -> UncertaintySet {
    let drift: Arc<DriftFn> = Arc::new(move |_, _, _, out| {
        out[0] = b;
        Ok(())
    });
    let diffusion: Arc<DiffusionFn> = Arc::new(move |_, _, _, out| {
        out[0] = sigma;
        Ok(())
    });
    let constants = DeclaredConstants {
        linear_growth: Some(b * b + sigma * sigma + 1e-12),
        lipschitz: Some(0.0),
        bound: Some(b.abs() + sigma.abs()),
    };
    let field = CoefficientField::new(1, 1, drift, diffusion, constants);
    let controls = ControlSet::new(vec![vec![0.0]]).expect("singleton");
    UncertaintySet::new(controls, field)
}

/// One-dimensional interval uncertainty: drift ranging over
/// [b_lo(t, omega), b_hi(t, omega)] and diffusion density over
/// [a_lo(t, omega), a_hi(t, omega)], each parameterized affinely on [0, 1]
/// and discretized on a uniform grid of `n_controls` points per factor.
///
/// The control set is the product (drift factor) x (volatility factor);
/// sigma = sqrt(a). The bound ordering is validated at every evaluation.
pub fn interval_field(
    b_lo: BoundFn,
    b_hi: BoundFn,
    a_lo: BoundFn,
    a_hi: BoundFn,
    n_controls: usize,
    constants: DeclaredConstants,
) -> UncertaintySet {
    interval_field_grid(b_lo, b_hi, a_lo, a_hi, n_controls, n_controls, constants)
}

/// [`interval_field`] with separate grid refinements for the drift and
/// volatility factors; degenerate factors take a single point.
pub fn interval_field_grid(
    b_lo: BoundFn,
    b_hi: BoundFn,
    a_lo: BoundFn,
    a_hi: BoundFn,
    n_drift: usize,
    n_vol: usize,
    constants: DeclaredConstants,
) -> UncertaintySet {
    let (blo, bhi) = (b_lo.clone(), b_hi.clone());
    let drift: Arc<DriftFn> = Arc::new(move |f, t, prefix, out| {
        let lo = blo(t, prefix);
        let hi = bhi(t, prefix);
        if lo > hi {
            return Err(eval_err(format!("drift bounds out of order at t={t}: {lo} > {hi}")));
        }
        out[0] = lo + f[0] * (hi - lo);
        Ok(())
    });
    let (alo, ahi) = (a_lo.clone(), a_hi.clone());
    let diffusion: Arc<DiffusionFn> = Arc::new(move |f, t, prefix, out| {
        let lo = alo(t, prefix);
        let hi = ahi(t, prefix);
        if lo < 0.0 {
            return Err(eval_err(format!("diffusion lower bound negative at t={t}: {lo}")));
        }
        if lo > hi {
            return Err(eval_err(format!(
                "diffusion bounds out of order at t={t}: {lo} > {hi}"
            )));
        }
        out[0] = (lo + f[1] * (hi - lo)).sqrt();
        Ok(())
    });
    let field = CoefficientField::new(1, 1, drift, diffusion, constants);
    let drift_grid = ControlSet::uniform_grid(0.0, 1.0, n_drift);
    let vol_grid = ControlSet::uniform_grid(0.0, 1.0, n_vol);
    let controls = ControlSet::product(drift_grid, vol_grid).expect("non-empty");
    UncertaintySet::new(controls, field)
}

/// Constant-coefficient interval field on [b_lo, b_hi] x [a_lo, a_hi].
pub fn interval_field_const(
    b_lo: f64,
    b_hi: f64,
    a_lo: f64,
    a_hi: f64,
    n_controls: usize,
) -> UncertaintySet {
    let b_abs = b_lo.abs().max(b_hi.abs());
    let constants = DeclaredConstants {
        linear_growth: Some(b_abs * b_abs + a_hi + 1e-12),
        lipschitz: Some(0.0),
        bound: Some(b_abs + a_hi.max(0.0).sqrt()),
    };
    interval_field(
        constant_bound(b_lo),
        constant_bound(b_hi),
        constant_bound(a_lo),
        constant_bound(a_hi),
        n_controls,
        constants,
    )
}

/// Control-indexed ingredients of a linear delay drift.
pub type ControlScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type ControlKernelFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// One-dimensional linear delay field:
/// b(f, t, omega) = b0(f) omega(t) + integral over [(t-window) v 0, t] of
/// b1(f, s) omega(s) ds, with sigma(f) = sqrt(a0(f)) constant in (t, omega).
///
/// The windowed integral uses the grid trapezoid rule; a window reaching
/// before time 0 is clipped at 0.
pub fn delay_field(
    b0: ControlScalarFn,
    b1: ControlKernelFn,
    a0: ControlScalarFn,
    window: f64,
    drift_controls: Vec<Vec<f64>>,
    vol_controls: Vec<Vec<f64>>,
    constants: DeclaredConstants,
) -> Result<UncertaintySet, CoefficientError> {
    if window <= 0.0 {
        return Err(eval_err(format!("delay window must be positive, got {window}")));
    }
    let n_vol_coords = vol_controls[0].len();
    let drift: Arc<DriftFn> = Arc::new(move |f, _t, prefix, out| {
        let f_drift = &f[..f.len() - n_vol_coords];
        let local = b0(f_drift) * prefix.current()[0];
        let b1 = b1.clone();
        let integral = prefix.windowed_integral(window, 0, |s| b1(f_drift, s));
        out[0] = local + integral;
        Ok(())
    });
    let diffusion: Arc<DiffusionFn> = Arc::new(move |f, _t, _prefix, out| {
        let f_vol = &f[f.len() - n_vol_coords..];
        let a = a0(f_vol);
        if a < 0.0 {
            return Err(eval_err(format!("a0 negative: {a}")));
        }
        out[0] = a.sqrt();
        Ok(())
    });
    let field = CoefficientField::new(1, 1, drift, diffusion, constants);
    let controls = ControlSet::product(drift_controls, vol_controls)?;
    Ok(UncertaintySet::new(controls, field))
}
