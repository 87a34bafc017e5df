//! Tower-property check for the value function: compare v(t, omega) against
//! the best first-stage policy's average of restarted values at an
//! intermediate time tau.
//!
//! The inner restarts use a reduced path count (square-root rule) and a
//! constants-only optimizer, which biases the inner values slightly downward;
//! the discretization allowance in the tolerance absorbs this together with
//! the Euler error.

use serde::Serialize;

use crate::coefficients::UncertaintySet;
use crate::pathspace::{PathPair, TimeGrid};
use crate::simulate::{mean_stderr, mix_seed, simulate_map, SimConfig};

use super::{upper_expectation, EngineConfig, EngineError, Optimizer, Payoff};

#[derive(Debug, Clone, Serialize)]
pub struct DppReport {
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Best over first-stage candidates of the restart average.
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub best_first_stage: String,
    pub gap: f64,
    /// 3 * combined stderr + 0.5 * dt * growth constant.
    pub tolerance: f64,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub pass: bool,
}

/// Checks v(t, omega) = sup over first stages of E[v(tau, X)] at a
/// deterministic intermediate grid time `tau`.
pub fn dpp_check(
    start: &PathPair,
    tau: f64,
    psi: &Payoff,
    u: &UncertaintySet,
    cfg: &EngineConfig,
    outer_paths: usize,
) -> Result<DppReport, EngineError> {
    let grid: TimeGrid = *start.path().grid();
    let k_tau = grid.index_of(tau)?;
    if k_tau <= start.knot() || k_tau >= grid.n_steps() {
        return Err(EngineError::Precondition(format!(
            "tau = {tau} must lie strictly between the start time and the horizon"
        )));
    }

    let inner_paths = (cfg.sim.n_paths as f64).sqrt().ceil() as usize;
    let inner_paths = inner_paths.max(64);
    let steps_after_tau = grid.n_steps() - k_tau;
    let first_stage_candidates = u.controls.len() + 1;
    let nested_cost = outer_paths as f64
        * first_stage_candidates as f64
        * inner_paths as f64
        * steps_after_tau as f64
        * u.controls.len() as f64;
    if nested_cost > 5e10 {
        return Err(EngineError::Budget(format!(
            "nested Monte Carlo cost {nested_cost:.2e} path-steps exceeds the 5e10 budget"
        )));
    }

    let lhs = upper_expectation(start, psi, u, cfg)?;

    // first-stage candidates: the lhs argmax plus every constant policy
    let mut candidates = vec![lhs.policy.clone()];
    let steps = grid.n_steps() - start.knot();
    for c in 0..u.controls.len() {
        candidates.push(crate::simulate::Policy::constant(c, steps));
    }

    let mut inner_cfg = cfg.clone();
    inner_cfg.optimizer = Optimizer::Constants;
    inner_cfg.sim.n_paths = inner_paths;

    let mut best_rhs = f64::NEG_INFINITY;
    let mut best_stderr = 0.0;
    let mut best_label = String::new();
    // the outer noise and the per-restart inner streams are shared across
    // first-stage candidates (common random numbers): identical candidate
    // policies get bitwise-equal averages and the sup over candidates does
    // not inherit a max-of-independent-noise bias
    let outer_cfg = SimConfig {
        n_paths: outer_paths,
        seed: mix_seed(cfg.sim.seed, 0xD9),
        antithetic: outer_paths % 2 == 0,
    };
    for candidate in &candidates {
        // simulate the first stage; the trajectory beyond tau is ignored by
        // the restart, which re-simulates from tau
        let outer: Vec<crate::pathspace::DiscretePath> =
            simulate_map(start, candidate, u, &outer_cfg, Clone::clone)?;
        let mut inner_values = Vec::with_capacity(outer.len());
        for (i, path) in outer.into_iter().enumerate() {
            let restart = PathPair::at_knot(path, k_tau)?;
            let mut icfg = inner_cfg.clone();
            icfg.sim.seed = mix_seed(cfg.sim.seed, 0xB00 + i as u64);
            let inner = upper_expectation(&restart, psi, u, &icfg)?;
            // re-evaluate the selected policy on fresh noise: the restart value
            // is then unbiased for that policy instead of inheriting the
            // max-of-noisy-candidates selection bias
            let fresh = SimConfig {
                n_paths: inner_paths,
                seed: mix_seed(icfg.sim.seed, 0xFE11),
                antithetic: false,
            };
            let (value, _) = crate::simulate::expect_functional(
                &restart,
                &inner.policy,
                u,
                &fresh,
                |p| psi.eval(p),
            )?;
            inner_values.push(value);
        }
        let (mean, stderr) = mean_stderr(&inner_values);
        if mean > best_rhs {
            best_rhs = mean;
            best_stderr = stderr;
            best_label = candidate.label.clone();
        }
    }

    let gap = (lhs.value - best_rhs).abs();
    let growth = u.field.constants.linear_growth.unwrap_or(1.0);
    let combined = (lhs.stderr * lhs.stderr + best_stderr * best_stderr).sqrt();
    let tolerance = 3.0 * combined + 0.5 * grid.dt() * growth;
    Ok(DppReport {
        lhs: lhs.value,
        lhs_stderr: lhs.stderr,
        rhs: best_rhs,
        rhs_stderr: best_stderr,
        best_first_stage: best_label,
        gap,
        tolerance,
        outer_paths,
        inner_paths,
        pass: gap <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{constant_field, interval_field_const};
    use crate::pathspace::DiscretePath;
    use crate::simulate::SimConfig;

    fn start_at_zero(n_steps: usize) -> PathPair {
        let grid = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        PathPair::new(DiscretePath::constant(grid, &[0.0]), 0.0).unwrap()
    }

    #[test]
    fn deterministic_dynamics_have_zero_gap() {
        // sigma = 0, constant drift, psi = X_T: both sides are exact
        let u = interval_field_const(-1.0, 1.0, 0.0, 0.0, 3);
        let start = start_at_zero(16);
        let mut cfg = EngineConfig::new(SimConfig::new(64, 3));
        cfg.search_paths = 32;
        cfg.max_sweeps = 1;
        cfg.restarts = 0;
        let report = dpp_check(&start, 0.5, &Payoff::identity(), &u, &cfg, 16).unwrap();
        assert!(report.gap <= 1e-10, "{report:?}");
        assert!(report.pass);
    }

    #[test]
    fn singleton_tower_property_holds_within_noise() {
        // ordinary conditional expectation: E[X_T] = E[E[X_T | F_tau]]
        let u = constant_field(0.2, 1.0);
        let start = start_at_zero(20);
        let cfg = EngineConfig::new(SimConfig::new(4000, 7));
        let report = dpp_check(&start, 0.5, &Payoff::identity(), &u, &cfg, 48).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn tau_must_be_interior() {
        let u = constant_field(0.0, 1.0);
        let start = start_at_zero(10);
        let cfg = EngineConfig::new(SimConfig::new(100, 1));
        assert!(dpp_check(&start, 0.0, &Payoff::identity(), &u, &cfg, 8).is_err());
        assert!(dpp_check(&start, 1.0, &Payoff::identity(), &u, &cfg, 8).is_err());
    }

    #[test]
    fn budget_guard_rejects_huge_nested_runs() {
        let u = interval_field_const(-1.0, 1.0, 0.5, 2.0, 5);
        let start = start_at_zero(400);
        let cfg = EngineConfig::new(SimConfig::new(100_000_000, 1));
        let err = dpp_check(&start, 0.5, &Payoff::identity(), &u, &cfg, 100_000).unwrap_err();
        assert!(matches!(err, EngineError::Budget(_)));
    }
}
