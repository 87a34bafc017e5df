//! Discrete path space: uniform time grids, sampled paths, the concatenation
//! operators used to splice a prefix onto a continuation, stopping, and the
//! pseudometric on (time, path) pairs.
//!
//! Paths are immutable values; every operator returns a new path. All
//! operators require grid alignment (the splice time must be a knot), which
//! keeps them exact — no interpolation error enters the tests built on top.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when matching a time against a grid knot.
const KNOT_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("time {t} is not a grid knot (step {dt})")]
    OffGrid { t: f64, dt: f64 },
    #[error("grids do not match: {0}")]
    GridMismatch(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("continuation of length {needed} does not fit in [0, {available}]")]
    HorizonExceeded { needed: f64, available: f64 },
    #[error("non-finite value in path data")]
    NonFinite,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Uniform grid of knots t0, t0 + dt, ..., T with dt = (T - t0) / n_steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, n_steps: usize) -> Result<Self, PathError> {
        if !(t0.is_finite() && horizon.is_finite()) {
            return Err(PathError::InvalidGrid("non-finite endpoints".into()));
        }
        if t0 < 0.0 {
            return Err(PathError::InvalidGrid(format!("t0 = {t0} < 0")));
        }
        if n_steps == 0 {
            return Err(PathError::InvalidGrid("n_steps must be positive".into()));
        }
        if horizon <= t0 {
            return Err(PathError::InvalidGrid(format!(
                "horizon {horizon} must exceed t0 {t0}"
            )));
        }
        Ok(Self { t0, horizon, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of knots, `n_steps + 1`.
    pub fn n_knots(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    pub fn knot(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        self.t0 + i as f64 * self.dt()
    }

    /// Index of the knot equal to `t`, within a relative tolerance.
    pub fn index_of(&self, t: f64) -> Result<usize, PathError> {
        let dt = self.dt();
        let raw = (t - self.t0) / dt;
        let i = raw.round();
        let tol = KNOT_TOL * (1.0 + self.horizon.abs()) / dt;
        if i < 0.0 || i > self.n_steps as f64 || (raw - i).abs() > tol {
            return Err(PathError::OffGrid { t, dt });
        }
        Ok(i as usize)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_knots()).map(move |i| self.knot(i))
    }

    fn check_compatible(&self, other: &TimeGrid) -> Result<(), PathError> {
        if self != other {
            return Err(PathError::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

impl fmt::Display for TimeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}] / {}", self.t0, self.horizon, self.n_steps)
    }
}

/// A path sampled on a uniform grid, with `dim` components per knot.
///
/// Storage is flat row-major: knot `i` occupies `values[i*dim .. (i+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl DiscretePath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self, PathError> {
        if dim == 0 {
            return Err(PathError::InvalidGrid("dim must be positive".into()));
        }
        if values.len() != grid.n_knots() * dim {
            return Err(PathError::DimensionMismatch {
                left: values.len(),
                right: grid.n_knots() * dim,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PathError::NonFinite);
        }
        Ok(Self { grid, dim, values })
    }

    /// Builds a path by sampling `f` at every knot.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut values = vec![0.0; grid.n_knots() * dim];
        for i in 0..grid.n_knots() {
            f(grid.knot(i), &mut values[i * dim..(i + 1) * dim]);
        }
        Self { grid, dim, values }
    }

    /// Scalar (d = 1) path from a function of time.
    pub fn scalar_from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        Self::from_fn(grid, 1, |t, out| out[0] = f(t))
    }

    pub fn constant(grid: TimeGrid, point: &[f64]) -> Self {
        let dim = point.len();
        let mut values = Vec::with_capacity(grid.n_knots() * dim);
        for _ in 0..grid.n_knots() {
            values.extend_from_slice(point);
        }
        Self { grid, dim, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for simulation buffers; callers keep values finite.
    pub(crate) fn values_mut(&mut self) -> &mut Vec<f64> {
        &mut self.values
    }

    /// Value at knot index `i`.
    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Value at a grid time `t`.
    pub fn value_at(&self, t: f64) -> Result<&[f64], PathError> {
        Ok(self.value(self.grid.index_of(t)?))
    }

    pub fn terminal(&self) -> &[f64] {
        self.value(self.grid.n_steps)
    }

    fn check_pairable(&self, other: &DiscretePath) -> Result<(), PathError> {
        self.grid.check_compatible(&other.grid)?;
        if self.dim != other.dim {
            return Err(PathError::DimensionMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        Ok(())
    }

    /// The stopped path: equal to `self` up to `t`, frozen at `self(t)` after.
    pub fn stop(&self, t: f64) -> Result<DiscretePath, PathError> {
        let k = self.grid.index_of(t)?;
        let mut values = self.values.clone();
        let frozen: Vec<f64> = self.value(k).to_vec();
        for i in (k + 1)..self.grid.n_knots() {
            values[i * self.dim..(i + 1) * self.dim].copy_from_slice(&frozen);
        }
        Ok(DiscretePath { grid: self.grid, dim: self.dim, values })
    }

    /// Concatenation that keeps the continuation's own clock:
    /// result(s) = self(s) for s < t and self(t) + other(s) - other(t) for s >= t.
    pub fn concat_freeze(&self, t: f64, other: &DiscretePath) -> Result<DiscretePath, PathError> {
        self.check_pairable(other)?;
        let k = self.grid.index_of(t)?;
        let d = self.dim;
        let mut values = self.values.clone();
        let anchor = self.value(k).to_vec();
        let base = other.value(k).to_vec();
        for i in k..self.grid.n_knots() {
            let dst = &mut values[i * d..(i + 1) * d];
            let src = other.value(i);
            for j in 0..d {
                dst[j] = src[j] + (anchor[j] - base[j]);
            }
        }
        Ok(DiscretePath { grid: self.grid, dim: d, values })
    }

    /// Concatenation that restarts the continuation's clock at `t`:
    /// result(s) = self(s) for s < t and self(t) + other(s - t) - other(0) for s >= t.
    ///
    /// `other` must live on a grid with the same step, starting at 0, long
    /// enough to cover `[0, horizon - t]`.
    pub fn concat_shift(&self, t: f64, other: &DiscretePath) -> Result<DiscretePath, PathError> {
        if self.dim != other.dim {
            return Err(PathError::DimensionMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        let dt = self.grid.dt();
        if (other.grid.dt() - dt).abs() > KNOT_TOL * dt || other.grid.t0() != 0.0 {
            return Err(PathError::GridMismatch(
                "continuation must start at 0 on the same step size".into(),
            ));
        }
        let k = self.grid.index_of(t)?;
        let remaining = self.grid.n_steps - k;
        if other.grid.n_steps() < remaining {
            return Err(PathError::HorizonExceeded {
                needed: remaining as f64 * dt,
                available: other.grid.horizon(),
            });
        }
        let d = self.dim;
        let mut values = self.values.clone();
        let anchor = self.value(k).to_vec();
        let base = other.value(0).to_vec();
        for i in k..self.grid.n_knots() {
            let dst = &mut values[i * d..(i + 1) * d];
            let src = other.value(i - k);
            for j in 0..d {
                dst[j] = src[j] + (anchor[j] - base[j]);
            }
        }
        Ok(DiscretePath { grid: self.grid, dim: d, values })
    }

    /// The delayed path s -> self((s - t)^+), on the same grid.
    pub fn shift_forward(&self, t: f64) -> Result<DiscretePath, PathError> {
        let k = self.grid.index_of(t)?;
        let d = self.dim;
        let mut out = self.values.clone();
        for i in 0..self.grid.n_knots() {
            let j = i.saturating_sub(k);
            out[i * d..(i + 1) * d].copy_from_slice(self.value(j));
        }
        Ok(DiscretePath { grid: self.grid, dim: d, values: out })
    }

    /// Max over knots `<= up_to` of the Euclidean distance between two paths.
    pub fn sup_distance(&self, other: &DiscretePath, up_to: f64) -> Result<f64, PathError> {
        self.check_pairable(other)?;
        let k = self.grid.index_of(up_to)?;
        let mut best = 0.0_f64;
        for i in 0..=k {
            best = best.max(euclidean_distance(self.value(i), other.value(i)));
        }
        Ok(best)
    }

    /// Running sup of the Euclidean norm over knots `<= up_to`.
    pub fn sup_norm(&self, up_to: f64) -> Result<f64, PathError> {
        let k = self.grid.index_of(up_to)?;
        let mut best = 0.0_f64;
        for i in 0..=k {
            best = best.max(euclidean_norm(self.value(i)));
        }
        Ok(best)
    }

    /// Writes the path as CSV with columns `t,x_1,..,x_d`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "t")?;
        for j in 0..self.dim {
            write!(w, ",x_{}", j + 1)?;
        }
        writeln!(w)?;
        for i in 0..self.grid.n_knots() {
            write!(w, "{}", self.grid.knot(i))?;
            for v in self.value(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// A (time, path) pair with the time pinned to a grid knot.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPair {
    path: DiscretePath,
    knot: usize,
}

impl PathPair {
    pub fn new(path: DiscretePath, t: f64) -> Result<Self, PathError> {
        let knot = path.grid().index_of(t)?;
        Ok(Self { path, knot })
    }

    pub fn at_knot(path: DiscretePath, knot: usize) -> Result<Self, PathError> {
        if knot >= path.grid().n_knots() {
            return Err(PathError::OffGrid {
                t: f64::NAN,
                dt: path.grid().dt(),
            });
        }
        Ok(Self { path, knot })
    }

    pub fn t(&self) -> f64 {
        self.path.grid().knot(self.knot)
    }

    pub fn knot(&self) -> usize {
        self.knot
    }

    pub fn path(&self) -> &DiscretePath {
        &self.path
    }

    pub fn state(&self) -> &[f64] {
        self.path.value(self.knot)
    }
}

/// The pseudometric |t - s| + sup_r ||omega(r ^ t) - alpha(r ^ s)|| evaluated
/// over the grid knots of the common horizon.
///
/// Two pairs with equal stopped paths have distance 0; this is a pseudometric,
/// not a metric.
pub fn pseudometric(p: &PathPair, q: &PathPair) -> Result<f64, PathError> {
    Ok((p.t() - q.t()).abs() + stopped_sup_term(p, q)?)
}

/// The Hoelder-modulus denominator |t - s|^{1/2} + sup_r ||omega(r ^ t) - alpha(r ^ s)||.
pub fn holder_distance(p: &PathPair, q: &PathPair) -> Result<f64, PathError> {
    Ok((p.t() - q.t()).abs().sqrt() + stopped_sup_term(p, q)?)
}

fn stopped_sup_term(p: &PathPair, q: &PathPair) -> Result<f64, PathError> {
    p.path.check_pairable(&q.path)?;
    let grid = p.path.grid();
    let mut sup = 0.0_f64;
    for r in 0..grid.n_knots() {
        let a = p.path.value(r.min(p.knot));
        let b = q.path.value(r.min(q.knot));
        sup = sup.max(euclidean_distance(a, b));
    }
    Ok(sup)
}

pub fn euclidean_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn euclidean_distance(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    fn ramp(n: usize) -> DiscretePath {
        DiscretePath::scalar_from_fn(unit_grid(n), |t| t)
    }

    #[test]
    fn grid_rejects_degenerate_inputs() {
        assert!(TimeGrid::new(0.0, 0.0, 4).is_err());
        assert!(TimeGrid::new(0.5, 0.25, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 1.0, 4).is_err());
    }

    #[test]
    fn index_of_rejects_off_grid_times() {
        let g = unit_grid(10);
        assert_eq!(g.index_of(0.3).unwrap(), 3);
        assert!(matches!(g.index_of(0.35), Err(PathError::OffGrid { .. })));
        assert!(g.index_of(1.2).is_err());
    }

    #[test]
    fn stop_at_horizon_is_identity() {
        let w = ramp(8);
        assert_eq!(w.stop(1.0).unwrap(), w);
    }

    #[test]
    fn stop_of_constant_path_is_identity() {
        let c = DiscretePath::constant(unit_grid(8), &[2.5]);
        assert_eq!(c.stop(0.5).unwrap(), c);
    }

    #[test]
    fn stop_freezes_the_ramp() {
        let w = ramp(10);
        let s = w.stop(0.5).unwrap();
        for (i, t) in w.grid().times().enumerate() {
            assert_abs_diff_eq!(s.value(i)[0], t.min(0.5), epsilon = 1e-15);
        }
    }

    #[test]
    fn stop_is_idempotent() {
        let w = ramp(10);
        let s = w.stop(0.3).unwrap();
        assert_eq!(s.stop(0.3).unwrap(), s);
    }

    #[test]
    fn concat_freeze_with_itself_is_identity() {
        let w = ramp(10);
        for t in [0.0, 0.4, 1.0] {
            assert_eq!(w.concat_freeze(t, &w).unwrap(), w);
        }
    }

    #[test]
    fn concat_freeze_zero_prefix_with_ramp() {
        let zero = DiscretePath::constant(unit_grid(10), &[0.0]);
        let w = ramp(10);
        let glued = zero.concat_freeze(0.5, &w).unwrap();
        for (i, t) in glued.grid().times().enumerate() {
            let expect = if t < 0.5 { 0.0 } else { t - 0.5 };
            assert_abs_diff_eq!(glued.value(i)[0], expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn concat_shift_matches_delayed_freeze() {
        // result of the clock-restarting splice equals the clock-keeping splice
        // of the forward-shifted continuation, knot by knot
        let g = unit_grid(16);
        let w = DiscretePath::scalar_from_fn(g, |t| (3.1 * t).sin());
        let cont = DiscretePath::scalar_from_fn(g, |t| t * t - 0.3 * t);
        for t in [0.0, 0.25, 0.75] {
            let shifted = w.concat_shift(t, &cont).unwrap();
            let frozen = w.concat_freeze(t, &cont.shift_forward(t).unwrap()).unwrap();
            for i in 0..g.n_knots() {
                assert_abs_diff_eq!(shifted.value(i)[0], frozen.value(i)[0], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn concat_shift_value_at_junction_is_prefix_value() {
        let g = unit_grid(16);
        let w = DiscretePath::scalar_from_fn(g, |t| (2.0 * t).cos());
        let cont = DiscretePath::scalar_from_fn(g, |t| 5.0 * t);
        let out = w.concat_shift(0.5, &cont).unwrap();
        assert_abs_diff_eq!(
            out.value_at(0.5).unwrap()[0],
            w.value_at(0.5).unwrap()[0],
            epsilon = 1e-15
        );
    }

    #[test]
    fn concat_shift_at_zero_with_matching_start_recovers_continuation() {
        let g = unit_grid(16);
        let w = DiscretePath::scalar_from_fn(g, |t| 1.0 + t);
        let cont = DiscretePath::scalar_from_fn(g, |t| 1.0 + t.powi(2));
        // cont(0) = w(0) = 1
        let out = w.concat_shift(0.0, &cont).unwrap();
        assert_eq!(out, cont);
    }

    #[test]
    fn concat_shift_rejects_short_continuations() {
        let w = ramp(10);
        let short = DiscretePath::scalar_from_fn(TimeGrid::new(0.0, 0.3, 3).unwrap(), |t| t);
        assert!(matches!(
            w.concat_shift(0.5, &short),
            Err(PathError::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn pseudometric_basic_values() {
        let g = unit_grid(10);
        let zero = DiscretePath::constant(g, &[0.0]);
        let p = PathPair::new(zero.clone(), 0.2).unwrap();
        let q = PathPair::new(zero.clone(), 0.7).unwrap();
        assert_abs_diff_eq!(pseudometric(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(pseudometric(&p, &q).unwrap(), 0.5, epsilon = 1e-12);

        // ramp against zero, both stopped at the horizon: sup |r ^ 1 - 0| = 1
        let w = ramp(10);
        let pw = PathPair::new(w, 1.0).unwrap();
        let qz = PathPair::new(zero, 1.0).unwrap();
        assert_abs_diff_eq!(pseudometric(&pw, &qz).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sup_distance_examples() {
        let w = ramp(10);
        let zero = DiscretePath::constant(unit_grid(10), &[0.0]);
        assert_eq!(w.sup_distance(&w, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(w.sup_distance(&zero, 0.5).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_numbers() {
        let w = ramp(2);
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x_1\n0,0\n"));
    }

    fn arb_path(n: usize) -> impl Strategy<Value = DiscretePath> {
        prop::collection::vec(-5.0..5.0f64, n + 1).prop_map(move |vals| {
            DiscretePath::new(unit_grid(n), 1, vals).unwrap()
        })
    }

    proptest! {
        #[test]
        fn sup_distance_matches_brute_force(w in arb_path(12), a in arb_path(12), k in 0usize..=12) {
            let t = w.grid().knot(k);
            let got = w.sup_distance(&a, t).unwrap();
            let brute = (0..=k)
                .map(|i| (w.value(i)[0] - a.value(i)[0]).abs())
                .fold(0.0f64, f64::max);
            prop_assert!((got - brute).abs() <= 1e-14);
        }

        #[test]
        fn concat_freeze_evaluates_to_prefix_at_junction(
            w in arb_path(12), c in arb_path(12), k in 0usize..=12
        ) {
            let t = w.grid().knot(k);
            let out = w.concat_freeze(t, &c).unwrap();
            // direct evaluation of the defining formula at each knot
            for i in 0..w.grid().n_knots() {
                let expect = if i < k {
                    w.value(i)[0]
                } else {
                    w.value(k)[0] + c.value(i)[0] - c.value(k)[0]
                };
                prop_assert!((out.value(i)[0] - expect).abs() <= 1e-12);
            }
            prop_assert!((out.value(k)[0] - w.value(k)[0]).abs() <= 1e-15);
        }

        #[test]
        fn pseudometric_axioms(
            w in arb_path(10), a in arb_path(10), b in arb_path(10),
            i in 0usize..=10, j in 0usize..=10, k in 0usize..=10
        ) {
            let p = PathPair::at_knot(w, i).unwrap();
            let q = PathPair::at_knot(a, j).unwrap();
            let r = PathPair::at_knot(b, k).unwrap();
            let dpq = pseudometric(&p, &q).unwrap();
            let dqp = pseudometric(&q, &p).unwrap();
            prop_assert_eq!(dpq, dqp);
            let dpr = pseudometric(&p, &r).unwrap();
            let dqr = pseudometric(&q, &r).unwrap();
            prop_assert!(dpr <= dpq + dqr + 1e-12);
        }

        #[test]
        fn pseudometric_sees_only_stopped_paths(w in arb_path(10), a in arb_path(10), i in 0usize..=10, j in 0usize..=10) {
            let p = PathPair::at_knot(w.clone(), i).unwrap();
            let q = PathPair::at_knot(a.clone(), j).unwrap();
            let ps = PathPair::at_knot(w.stop(w.grid().knot(i)).unwrap(), i).unwrap();
            let qs = PathPair::at_knot(a.stop(a.grid().knot(j)).unwrap(), j).unwrap();
            prop_assert_eq!(pseudometric(&p, &q).unwrap(), pseudometric(&ps, &qs).unwrap());
        }

        #[test]
        fn stop_idempotent_prop(w in arb_path(12), k in 0usize..=12) {
            let t = w.grid().knot(k);
            let s = w.stop(t).unwrap();
            prop_assert_eq!(s.stop(t).unwrap(), s);
        }
    }
}
