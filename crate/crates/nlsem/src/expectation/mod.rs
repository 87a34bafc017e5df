//! The nonlinear expectation engine: v(t, omega) = sup over policies of the
//! Monte Carlo estimate of E[psi(omega spliced with the controlled SDE)].
//!
//! The optimizer ladder: every control point is evaluated as a constant
//! policy at the full path count; small instances are enumerated exhaustively;
//! larger ones run coordinate ascent over per-step controls under common
//! random numbers; product control sets additionally contribute the extremal
//! (pointwise worst-case) feedback policy. The reported value is the maximum
//! over the final-evaluated candidates, so it is a certified lower bound of
//! the sup over the full policy class, monotone under control refinement and
//! policy-class enlargement.

mod dpp;
mod hjb;
mod probes;

pub use dpp::{dpp_check, DppReport};
pub use hjb::{markov_hjb_oracle, HjbError, HjbGridSpec, ValueSurface};
pub use probes::{
    holder_modulus_probe, semicontinuity_probe, HolderReport, SemicontinuityReport,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::{CoefficientError, UncertaintySet};
use crate::pathspace::{DiscretePath, PathError, PathPair};
use crate::simulate::{
    mean_stderr, simulate_map, FeedbackCtx, Policy, SimConfig, SimError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("optimizer budget exceeded: {0}")]
    Budget(String),
    #[error("engine precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// A declared-bounded continuous path functional.
#[derive(Clone)]
pub struct Payoff {
    pub label: String,
    eval: Arc<dyn Fn(&DiscretePath) -> f64 + Send + Sync>,
    /// Declared sup bound, when the functional is bounded.
    pub bound: Option<f64>,
    /// Declared Lipschitz constant w.r.t. the sup norm, when available.
    pub lipschitz: Option<f64>,
}

impl Payoff {
    pub fn new(
        label: impl Into<String>,
        eval: impl Fn(&DiscretePath) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), eval: Arc::new(eval), bound: None, lipschitz: None }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    /// psi(omega) = g(omega_1(T)).
    pub fn terminal(label: impl Into<String>, g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(label, move |p: &DiscretePath| g(p.terminal()[0]))
    }

    /// (X_T)^+
    pub fn call() -> Self {
        Self::terminal("call", |x| x.max(0.0)).with_lipschitz(1.0)
    }

    /// X_T
    pub fn identity() -> Self {
        Self::terminal("terminal-value", |x| x).with_lipschitz(1.0)
    }

    /// clamp(X_T, lo, hi)
    pub fn clamp(lo: f64, hi: f64) -> Self {
        Self::terminal(format!("clamp[{lo},{hi}]"), move |x| x.clamp(lo, hi))
            .with_bound(lo.abs().max(hi.abs()))
            .with_lipschitz(1.0)
    }

    pub fn eval(&self, path: &DiscretePath) -> f64 {
        (self.eval)(path)
    }

    /// psi1 + psi2, for the sublinearity checks.
    pub fn sum(a: &Payoff, b: &Payoff) -> Self {
        let (fa, fb) = (a.eval.clone(), b.eval.clone());
        Self {
            label: format!("{}+{}", a.label, b.label),
            eval: Arc::new(move |p| fa(p) + fb(p)),
            bound: a.bound.zip(b.bound).map(|(x, y)| x + y),
            lipschitz: a.lipschitz.zip(b.lipschitz).map(|(x, y)| x + y),
        }
    }

    /// lambda * psi for lambda >= 0.
    pub fn scale(&self, lambda: f64) -> Self {
        let f = self.eval.clone();
        Self {
            label: format!("{}*{lambda}", self.label),
            eval: Arc::new(move |p| lambda * f(p)),
            bound: self.bound.map(|b| b * lambda),
            lipschitz: self.lipschitz.map(|l| l * lambda),
        }
    }

    /// psi + c.
    pub fn plus_const(&self, c: f64) -> Self {
        let f = self.eval.clone();
        Self {
            label: format!("{}+{c}", self.label),
            eval: Arc::new(move |p| f(p) + c),
            bound: self.bound.map(|b| b + c.abs()),
            lipschitz: self.lipschitz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Exhaustive when the open-loop space is small, coordinate ascent otherwise.
    Auto,
    Exhaustive,
    CoordinateAscent,
    /// Constant policies (and the extremal policy, when available) only.
    Constants,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    pub optimizer: Optimizer,
    /// Exhaustive enumeration is allowed only when n_controls^steps stays below this.
    pub exhaustive_cap: f64,
    /// Path count used while searching; the winner is re-evaluated at `sim.n_paths`.
    pub search_paths: usize,
    pub max_sweeps: usize,
    /// Random restarts for coordinate ascent.
    pub restarts: usize,
    /// Ascent stops when a sweep improves the value by less than
    /// rtol * |value| + atol.
    pub improvement_rtol: f64,
    pub improvement_atol: f64,
    pub sim: SimConfig,
}

impl EngineConfig {
    pub fn new(sim: SimConfig) -> Self {
        Self {
            optimizer: Optimizer::Auto,
            exhaustive_cap: 1e5,
            search_paths: 1024,
            max_sweeps: 3,
            restarts: 1,
            improvement_rtol: 1e-4,
            improvement_atol: 1e-6,
            sim,
        }
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub(crate) fn eval_cfg(&self) -> SimConfig {
        SimConfig {
            n_paths: self.sim.n_paths,
            seed: crate::simulate::mix_seed(self.sim.seed, 0xE7A1),
            antithetic: self.sim.antithetic,
        }
    }

    pub(crate) fn search_cfg(&self) -> SimConfig {
        SimConfig {
            n_paths: self.search_paths.min(self.sim.n_paths),
            seed: crate::simulate::mix_seed(self.sim.seed, 0x5EA2),
            antithetic: self.sim.antithetic,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct OptimizerTrace {
    /// Monte Carlo policy evaluations performed.
    pub evaluations: usize,
    /// Ascent sweeps run.
    pub sweeps: usize,
    /// Accepted improvements during the search.
    pub improvements: usize,
    /// Final candidates as (label, value) in evaluation order.
    pub candidates: Vec<(String, f64)>,
}

/// Value, Monte Carlo standard error and the optimizing policy.
pub struct ValueEstimate {
    pub value: f64,
    pub stderr: f64,
    pub policy: Policy,
    pub trace: OptimizerTrace,
}

fn eval_policy(
    start: &PathPair,
    policy: &Policy,
    u: &UncertaintySet,
    psi: &Payoff,
    cfg: &SimConfig,
) -> Result<(f64, f64), SimError> {
    let values = simulate_map(start, policy, u, cfg, |p| psi.eval(p))?;
    Ok(mean_stderr(&values))
}

/// The worst-case feedback policy on a product control set (d = 1): at every
/// decision point it selects the drift factor maximizing b and the volatility
/// factor maximizing a = sigma^2, evaluated on the running prefix.
pub fn extremal_policy(u: &UncertaintySet) -> Result<Policy, EngineError> {
    let product = u
        .controls
        .product_structure()
        .ok_or(EngineError::Precondition("extremal policy needs a product control set".into()))?;
    if u.field.dim() != 1 {
        return Err(EngineError::Precondition(
            "extremal policy is defined for d = 1".into(),
        ));
    }
    let n0 = product.drift.len();
    let n1 = product.vol.len();
    let u = u.clone();
    let rule = move |ctx: &FeedbackCtx<'_>| -> usize {
        // evaluation failures surface in the simulation step right after,
        // so falling back to control 0 here loses nothing
        let controls = &u.controls;
        let mut b = [0.0_f64];
        let mut best0 = 0usize;
        let mut best0_val = f64::NEG_INFINITY;
        for i0 in 0..n0 {
            let flat = match controls.flat_index(i0, 0) {
                Ok(f) => f,
                Err(_) => return 0,
            };
            let point = match controls.point(flat) {
                Ok(p) => p,
                Err(_) => return 0,
            };
            if u.field.drift(point, ctx.t, ctx.prefix, &mut b).is_err() {
                return 0;
            }
            if b[0] > best0_val {
                best0_val = b[0];
                best0 = i0;
            }
        }
        let mut best1 = 0usize;
        let mut best1_val = f64::NEG_INFINITY;
        for i1 in 0..n1 {
            let flat = match controls.flat_index(0, i1) {
                Ok(f) => f,
                Err(_) => return 0,
            };
            let point = match controls.point(flat) {
                Ok(p) => p,
                Err(_) => return 0,
            };
            let a = match u.field.a_matrix(point, ctx.t, ctx.prefix) {
                Ok(a) => a[0],
                Err(_) => return 0,
            };
            if a > best1_val {
                best1_val = a;
                best1 = i1;
            }
        }
        controls.flat_index(best0, best1).unwrap_or(0)
    };
    Ok(Policy::feedback("extremal", Arc::new(rule)))
}

/// v(t, omega): the supremum over the searched policy class of the
/// common-random-number Monte Carlo estimate of E[psi].
///
/// At the horizon no simulation happens and the value is psi(omega) exactly.
/// The reported value is the maximum over all final-evaluated candidates, so
/// it never decreases when the control set or the policy class grows.
pub fn upper_expectation(
    start: &PathPair,
    psi: &Payoff,
    u: &UncertaintySet,
    cfg: &EngineConfig,
) -> Result<ValueEstimate, EngineError> {
    let grid = *start.path().grid();
    let k0 = start.knot();
    let steps = grid.n_steps() - k0;
    if steps == 0 {
        // terminal condition: v(T, omega) = psi(omega), no simulation
        let value = psi.eval(&start.path().stop(grid.horizon())?);
        return Ok(ValueEstimate {
            value,
            stderr: 0.0,
            policy: Policy::open_loop("terminal", Vec::new()),
            trace: OptimizerTrace {
                candidates: vec![("terminal".into(), value)],
                ..Default::default()
            },
        });
    }

    let n_controls = u.controls.len();
    let eval_cfg = cfg.eval_cfg();
    let search_cfg = cfg.search_cfg();
    let mut trace = OptimizerTrace::default();
    // final candidates in a fixed order; ties resolve to the earliest
    let mut finals: Vec<(Policy, f64, f64)> = Vec::new();

    for c in 0..n_controls {
        let policy = Policy::constant(c, steps);
        let (mean, se) = eval_policy(start, &policy, u, psi, &eval_cfg)?;
        trace.evaluations += 1;
        trace.candidates.push((policy.label.clone(), mean));
        finals.push((policy, mean, se));
    }

    if u.controls.product_structure().is_some() && u.field.dim() == 1 {
        let policy = extremal_policy(u)?;
        let (mean, se) = eval_policy(start, &policy, u, psi, &eval_cfg)?;
        trace.evaluations += 1;
        trace.candidates.push((policy.label.clone(), mean));
        finals.push((policy, mean, se));
    }

    let space = (n_controls as f64).powi(steps as i32);
    let optimizer = match cfg.optimizer {
        Optimizer::Auto => {
            if space <= cfg.exhaustive_cap {
                Optimizer::Exhaustive
            } else {
                Optimizer::CoordinateAscent
            }
        }
        other => other,
    };

    match optimizer {
        Optimizer::Constants | Optimizer::Auto => {}
        Optimizer::Exhaustive => {
            if space > cfg.exhaustive_cap {
                return Err(EngineError::Budget(format!(
                    "exhaustive enumeration of {n_controls}^{steps} sequences exceeds cap {}",
                    cfg.exhaustive_cap
                )));
            }
            let mut best_seq = vec![0usize; steps];
            let mut best_val = f64::NEG_INFINITY;
            let mut seq = vec![0usize; steps];
            loop {
                let policy = Policy::open_loop("enum", seq.clone());
                let (mean, _) = eval_policy(start, &policy, u, psi, &search_cfg)?;
                trace.evaluations += 1;
                if mean > best_val {
                    best_val = mean;
                    best_seq = seq.clone();
                    trace.improvements += 1;
                }
                // odometer increment over the control alphabet
                let mut pos = 0;
                loop {
                    if pos == steps {
                        break;
                    }
                    seq[pos] += 1;
                    if seq[pos] < n_controls {
                        break;
                    }
                    seq[pos] = 0;
                    pos += 1;
                }
                if pos == steps {
                    break;
                }
            }
            let policy = Policy::open_loop(format!("exhaustive{best_seq:?}"), best_seq);
            let (mean, se) = eval_policy(start, &policy, u, psi, &eval_cfg)?;
            trace.evaluations += 1;
            trace.candidates.push((policy.label.clone(), mean));
            finals.push((policy, mean, se));
        }
        Optimizer::CoordinateAscent => {
            // start from the best constant (by final value) plus random restarts
            let best_const = finals
                .iter()
                .take(n_controls)
                .enumerate()
                .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let mut starts = vec![vec![best_const; steps]];
            for r in 0..cfg.restarts {
                let seed = crate::simulate::mix_seed(search_cfg.seed, 0xA5C0 + r as u64);
                if let Some(seq) = Policy::random_open_loop(seed, steps, n_controls)
                    .open_loop_indices()
                    .map(<[usize]>::to_vec)
                {
                    starts.push(seq);
                }
            }
            let mut best_seq: Option<Vec<usize>> = None;
            let mut best_val = f64::NEG_INFINITY;
            for start_seq in starts {
                let mut seq = start_seq;
                let policy = Policy::open_loop("ascent", seq.clone());
                let (mut current, _) = eval_policy(start, &policy, u, psi, &search_cfg)?;
                trace.evaluations += 1;
                for _ in 0..cfg.max_sweeps {
                    trace.sweeps += 1;
                    let sweep_start = current;
                    for step in 0..steps {
                        let orig = seq[step];
                        for c in 0..n_controls {
                            if c == orig {
                                continue;
                            }
                            let mut cand = seq.clone();
                            cand[step] = c;
                            let policy = Policy::open_loop("ascent", cand.clone());
                            let (mean, _) = eval_policy(start, &policy, u, psi, &search_cfg)?;
                            trace.evaluations += 1;
                            if mean > current {
                                current = mean;
                                seq = cand;
                                trace.improvements += 1;
                            }
                        }
                    }
                    if current - sweep_start < cfg.improvement_rtol * current.abs() + cfg.improvement_atol {
                        break;
                    }
                }
                if current > best_val {
                    best_val = current;
                    best_seq = Some(seq);
                }
            }
            if let Some(seq) = best_seq {
                let policy = Policy::open_loop("ascent", seq);
                let (mean, se) = eval_policy(start, &policy, u, psi, &eval_cfg)?;
                trace.evaluations += 1;
                trace.candidates.push((policy.label.clone(), mean));
                finals.push((policy, mean, se));
            }
        }
    }

    let (policy, value, stderr) = finals
        .into_iter()
        .reduce(|best, cand| if cand.1 > best.1 { cand } else { best })
        .expect("at least one candidate");
    Ok(ValueEstimate { value, stderr, policy, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{constant_field, interval_field_const};
    use crate::pathspace::TimeGrid;

    fn start_at(x0: f64, n_steps: usize) -> PathPair {
        let grid = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        PathPair::new(DiscretePath::constant(grid, &[x0]), 0.0).unwrap()
    }

    fn quick_cfg(n_paths: usize, seed: u64) -> EngineConfig {
        EngineConfig::new(SimConfig::new(n_paths, seed))
    }

    #[test]
    fn terminal_value_is_exact_payoff() {
        let u = constant_field(0.3, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let path = DiscretePath::scalar_from_fn(grid, |t| 2.0 * t);
        let start = PathPair::new(path, 1.0).unwrap();
        let est = upper_expectation(&start, &Payoff::identity(), &u, &quick_cfg(10, 1)).unwrap();
        assert_eq!(est.value, 2.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn singleton_set_reduces_to_plain_monte_carlo() {
        let u = constant_field(0.0, 1.0);
        let start = start_at(0.0, 40);
        let cfg = quick_cfg(20_000, 3);
        let est = upper_expectation(&start, &Payoff::call(), &u, &cfg).unwrap();
        // single policy: value equals the constant-policy MC estimate exactly
        let (mc, _) = eval_policy(
            &start,
            &Policy::constant(0, 40),
            &u,
            &Payoff::call(),
            &cfg.eval_cfg(),
        )
        .unwrap();
        assert_eq!(est.value, mc);
        let target = 1.0 / std::f64::consts::TAU.sqrt();
        assert!((est.value - target).abs() <= 3.0 * est.stderr.max(1e-3));
    }

    #[test]
    fn drift_interval_attains_upper_endpoint() {
        // b in [-1, 1], sigma = 1, psi = X_T: value 1.0 at the constant upper drift
        let u = interval_field_const(-1.0, 1.0, 1.0, 1.0, 3);
        let start = start_at(0.0, 25);
        let mut cfg = quick_cfg(20_000, 5);
        cfg.search_paths = 512;
        let est = upper_expectation(&start, &Payoff::identity(), &u, &cfg).unwrap();
        assert!(
            (est.value - 1.0).abs() <= (0.01f64).max(3.0 * est.stderr),
            "value {} stderr {}",
            est.value,
            est.stderr
        );
    }

    #[test]
    fn exhaustive_two_step_instance_selects_constant_upper_drift() {
        let u = interval_field_const(-1.0, 1.0, 1.0, 1.0, 3);
        let start = start_at(0.0, 2);
        let mut cfg = quick_cfg(4096, 9);
        cfg.optimizer = Optimizer::Exhaustive;
        let est = upper_expectation(&start, &Payoff::identity(), &u, &cfg).unwrap();
        // flat index of (drift = 1, vol singleton grid) is 2 * n1 + 0
        let n1 = u.controls.product_structure().unwrap().vol.len();
        let upper = 2 * n1;
        assert_eq!(est.policy.open_loop_indices().unwrap(), &[upper, upper][..]);
    }

    #[test]
    fn extremal_policy_picks_endpoints_on_intervals() {
        let u = interval_field_const(-1.0, 1.0, 1.0, 4.0, 3);
        let policy = extremal_policy(&u).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let w = DiscretePath::constant(grid, &[0.5]);
        let prefix = crate::coefficients::Prefix::of_path(&w, 1);
        let ctx = FeedbackCtx {
            step: 1,
            knot: 1,
            t: 0.25,
            state: &[0.5],
            prefix,
        };
        let index = match &policy.rule {
            crate::simulate::PolicyRule::Feedback(rule) => rule(&ctx),
            _ => panic!("extremal policy must be feedback"),
        };
        assert_eq!(index, u.controls.flat_index(2, 2).unwrap());
    }

    #[test]
    fn extremal_policy_requires_product_sets() {
        let u = crate::coefficients::UncertaintySet::new(
            crate::coefficients::ControlSet::new(vec![vec![0.0], vec![1.0]]).unwrap(),
            constant_field(0.0, 1.0).field.as_ref().clone(),
        );
        assert!(matches!(extremal_policy(&u), Err(EngineError::Precondition(_))));
    }

    #[test]
    fn enlarging_the_control_grid_never_decreases_the_value() {
        let start = start_at(0.0, 16);
        let mut cfg = quick_cfg(4000, 17);
        cfg.search_paths = 256;
        cfg.max_sweeps = 1;
        cfg.restarts = 0;
        // the 3-point grid {0, 1/2, 1} is a subset of the 5-point grid
        let coarse = interval_field_const(-1.0, 1.0, 1.0, 4.0, 3);
        let fine = interval_field_const(-1.0, 1.0, 1.0, 4.0, 5);
        let v3 = upper_expectation(&start, &Payoff::call(), &coarse, &cfg).unwrap();
        let v5 = upper_expectation(&start, &Payoff::call(), &fine, &cfg).unwrap();
        assert!(v5.value >= v3.value, "{} < {}", v5.value, v3.value);
    }

    #[test]
    fn positive_scaling_rescales_value_and_keeps_argmax() {
        let u = interval_field_const(-0.5, 0.5, 0.5, 2.0, 3);
        let start = start_at(0.1, 12);
        let mut cfg = quick_cfg(4000, 23);
        cfg.search_paths = 256;
        let psi = Payoff::clamp(-2.0, 2.0);
        let base = upper_expectation(&start, &psi, &u, &cfg).unwrap();
        let scaled = upper_expectation(&start, &psi.scale(2.5), &u, &cfg).unwrap();
        assert!((scaled.value - 2.5 * base.value).abs() <= 1e-9 * (1.0 + base.value.abs()));
        assert_eq!(scaled.policy.label, base.policy.label);
        let shifted = upper_expectation(&start, &psi.plus_const(0.7), &u, &cfg).unwrap();
        assert!((shifted.value - (base.value + 0.7)).abs() <= 1e-9);
        assert_eq!(shifted.policy.label, base.policy.label);
    }
}
