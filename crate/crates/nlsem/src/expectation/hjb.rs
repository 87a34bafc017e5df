//! Markovian finite-difference oracle for the value function on d = 1
//! instances: explicit backward marching of
//! dv/dt + sup_f { b(f,t,x) dv/dx + a(f,t,x)/2 d2v/dx2 } = 0, v(T, .) = g,
//! with upwind drift, central diffusion and a monotonicity (CFL) guard.
//!
//! This solver is independent of the Monte Carlo engine and serves as its
//! cross-check on Markovian scenarios.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::{CoefficientError, UncertaintySet};

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("explicit scheme unstable: need dt <= {required_dt:.3e}, have {have_dt:.3e} (raise n_t or enable substepping)")]
    Cfl { required_dt: f64, have_dt: f64 },
    #[error("oracle requires d = 1, field has d = {0}")]
    Dimension(usize),
    #[error("bad grid spec: {0}")]
    Config(String),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HjbGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    /// Number of space intervals; the grid has n_x + 1 nodes.
    pub n_x: usize,
    /// Requested number of time steps.
    pub n_t: usize,
    /// Refine the time step automatically until the scheme is monotone.
    /// With this off, a CFL violation is an error reporting the required dt.
    pub auto_substep: bool,
}

impl HjbGridSpec {
    pub fn new(x_min: f64, x_max: f64, n_x: usize, n_t: usize) -> Self {
        Self { x_min, x_max, n_x, n_t, auto_substep: true }
    }
}

/// Value surface v(t, x) on the solver's time-space grid.
#[derive(Debug, Clone)]
pub struct ValueSurface {
    ts: Vec<f64>,
    xs: Vec<f64>,
    /// Row-major: values[m * n_x_nodes + i] = v(ts[m], xs[i]).
    values: Vec<f64>,
}

impl ValueSurface {
    pub fn ts(&self) -> &[f64] {
        &self.ts
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn node(&self, m: usize, i: usize) -> f64 {
        self.values[m * self.xs.len() + i]
    }

    /// Bilinear interpolation inside the grid; clamped at the edges.
    pub fn value_at(&self, t: f64, x: f64) -> f64 {
        let (mt, wt) = locate(&self.ts, t);
        let (ix, wx) = locate(&self.xs, x);
        let f = |m: usize, i: usize| self.node(m, i);
        let lo = f(mt, ix) * (1.0 - wx) + f(mt, ix + 1) * wx;
        let hi = f(mt + 1, ix) * (1.0 - wx) + f(mt + 1, ix + 1) * wx;
        lo * (1.0 - wt) + hi * wt
    }

    pub fn dt(&self) -> f64 {
        self.ts[1] - self.ts[0]
    }

    pub fn dx(&self) -> f64 {
        self.xs[1] - self.xs[0]
    }
}

fn locate(grid: &[f64], v: f64) -> (usize, f64) {
    let n = grid.len();
    if v <= grid[0] {
        return (0, 0.0);
    }
    if v >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let h = grid[1] - grid[0];
    let raw = (v - grid[0]) / h;
    let i = (raw.floor() as usize).min(n - 2);
    (i, raw - i as f64)
}

/// Solves the Markovian HJB equation backward from `terminal` over
/// [0, horizon] x [x_min, x_max].
///
/// Preconditions: b and sigma read the path only through its current value
/// (the solver evaluates them on synthetic constant prefixes), and the
/// terminal condition is Lipschitz.
pub fn markov_hjb_oracle(
    u: &UncertaintySet,
    terminal: impl Fn(f64) -> f64,
    horizon: f64,
    spec: &HjbGridSpec,
) -> Result<ValueSurface, HjbError> {
    if u.field.dim() != 1 {
        return Err(HjbError::Dimension(u.field.dim()));
    }
    if spec.n_x < 2 || spec.n_t == 0 || spec.x_max <= spec.x_min || horizon <= 0.0 {
        return Err(HjbError::Config(format!("{spec:?}, horizon {horizon}")));
    }
    let n_nodes = spec.n_x + 1;
    let dx = (spec.x_max - spec.x_min) / spec.n_x as f64;
    let xs: Vec<f64> = (0..n_nodes).map(|i| spec.x_min + i as f64 * dx).collect();

    // monotonicity scan: dt * max(a / dx^2 + |b| / dx) <= 1
    let mut worst = 0.0_f64;
    let scan_times = 8.min(spec.n_t);
    for m in 0..=scan_times {
        let t = horizon * m as f64 / scan_times as f64;
        for &x in &xs {
            for point in u.controls.points() {
                let (b, a) = u.field.eval_markov(point, t, &[x])?;
                worst = worst.max(a[0] / (dx * dx) + b[0].abs() / dx);
            }
        }
    }
    let required_dt = if worst > 0.0 { 0.95 / worst } else { f64::INFINITY };
    let mut n_t = spec.n_t;
    let have_dt = horizon / n_t as f64;
    if have_dt > required_dt {
        if spec.auto_substep {
            n_t = (horizon / required_dt).ceil() as usize;
        } else {
            return Err(HjbError::Cfl { required_dt, have_dt });
        }
    }
    let dt = horizon / n_t as f64;
    let ts: Vec<f64> = (0..=n_t).map(|m| m as f64 * dt).collect();

    let mut values = vec![0.0; (n_t + 1) * n_nodes];
    for (i, &x) in xs.iter().enumerate() {
        values[n_t * n_nodes + i] = terminal(x);
    }

    // backward march; boundary rows use a zero second derivative and the
    // common one-sided slope, which keeps affine profiles exact
    for m in (0..n_t).rev() {
        let t = ts[m];
        let (prev, cur) = values.split_at_mut((m + 1) * n_nodes);
        let v_next = &cur[..n_nodes]; // row m+1 relative to the split
        let v_now = &mut prev[m * n_nodes..(m + 1) * n_nodes];
        for i in 0..n_nodes {
            let x = xs[i];
            let (slope_up, slope_down, second) = if i == 0 {
                let s = (v_next[1] - v_next[0]) / dx;
                (s, s, 0.0)
            } else if i == n_nodes - 1 {
                let s = (v_next[i] - v_next[i - 1]) / dx;
                (s, s, 0.0)
            } else {
                (
                    (v_next[i + 1] - v_next[i]) / dx,
                    (v_next[i] - v_next[i - 1]) / dx,
                    (v_next[i + 1] - 2.0 * v_next[i] + v_next[i - 1]) / (dx * dx),
                )
            };
            let mut ham = f64::NEG_INFINITY;
            for point in u.controls.points() {
                let (b, a) = u.field.eval_markov(point, t, &[x])?;
                let drift_term = if b[0] >= 0.0 { b[0] * slope_up } else { b[0] * slope_down };
                ham = ham.max(drift_term + 0.5 * a[0] * second);
            }
            v_now[i] = v_next[i] + dt * ham;
        }
    }

    Ok(ValueSurface { ts, xs, values })
}
