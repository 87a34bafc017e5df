//! Controlled Euler-Maruyama simulation of
//! dX = b(f_t, t, X) dt + sigma(f_t, t, X) dW under a policy.
//!
//! Noise is a counter-based deterministic stream keyed by
//! (seed, path index, step index): each path owns a ChaCha stream selected by
//! its index, and every step consumes a fixed number of draws. Simulations are
//! therefore bitwise reproducible under any parallel schedule, and two
//! policies simulated under the same (seed, start) consume identical noise —
//! the common-random-number coupling the optimizer and the continuity probes
//! rely on.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::{CoefficientError, Prefix, UncertaintySet};
use crate::pathspace::{DiscretePath, PathError, PathPair};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },
    #[error("policy index {index} out of range ({len} controls) on path {path} at step {step}")]
    PolicyIndex { path: usize, step: usize, index: usize, len: usize },
    #[error("open-loop policy supplies {got} steps, simulation needs {needed}")]
    PolicyLength { needed: usize, got: usize },
    #[error("bad simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Monte Carlo configuration. The time grid is carried by the start path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Mirror the noise of each even-indexed path on its successor.
    pub antithetic: bool,
}

impl SimConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self { n_paths, seed, antithetic: false }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n_paths == 0 {
            return Err(SimError::Config("n_paths must be >= 1".into()));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(SimError::Config("antithetic pairing needs an even n_paths".into()));
        }
        Ok(())
    }
}

/// Context a feedback rule sees at a decision step: everything is a function
/// of the path prefix, so rules are non-anticipative by construction.
pub struct FeedbackCtx<'a> {
    /// Step index within the simulation (0 at the start time).
    pub step: usize,
    /// Absolute knot index on the grid.
    pub knot: usize,
    pub t: f64,
    pub state: &'a [f64],
    pub prefix: Prefix<'a>,
}

pub type FeedbackRule = dyn Fn(&FeedbackCtx<'_>) -> usize + Send + Sync;

#[derive(Clone)]
pub enum PolicyRule {
    /// One flat control index per simulation step.
    OpenLoop(Vec<usize>),
    /// Control index as a function of the running prefix.
    Feedback(Arc<FeedbackRule>),
}

/// A piecewise-constant control process: the policy chooses one control point
/// per time step, either as a fixed sequence or as a feedback rule on path
/// features.
#[derive(Clone)]
pub struct Policy {
    pub label: String,
    pub rule: PolicyRule,
}

impl Policy {
    pub fn open_loop(label: impl Into<String>, steps: Vec<usize>) -> Self {
        Self { label: label.into(), rule: PolicyRule::OpenLoop(steps) }
    }

    /// Same control index at every step.
    pub fn constant(index: usize, steps: usize) -> Self {
        Self {
            label: format!("const[{index}]"),
            rule: PolicyRule::OpenLoop(vec![index; steps]),
        }
    }

    pub fn feedback(label: impl Into<String>, rule: Arc<FeedbackRule>) -> Self {
        Self { label: label.into(), rule: PolicyRule::Feedback(rule) }
    }

    /// Uniformly random open-loop sequence, for supermartingale spot checks.
    pub fn random_open_loop(seed: u64, steps: usize, n_controls: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq: Vec<usize> = (0..steps).map(|_| rng.gen_range(0..n_controls)).collect();
        Self { label: format!("random[{seed}]"), rule: PolicyRule::OpenLoop(seq) }
    }

    /// Open-loop indices when the policy is a fixed sequence.
    pub fn open_loop_indices(&self) -> Option<&[usize]> {
        match &self.rule {
            PolicyRule::OpenLoop(seq) => Some(seq),
            PolicyRule::Feedback(_) => None,
        }
    }
}

/// Simulated batch: the concatenated trajectories (prefix spliced with the
/// simulated continuation) and the noise stream key that produced them.
#[derive(Debug)]
pub struct SampleBatch {
    pub paths: Vec<DiscretePath>,
    pub start_knot: usize,
    pub seed: u64,
}

/// Derives an independent stream key from a base seed and a tag (splitmix64).
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// One normal draw consumes exactly two 64-bit words, so the draw for
// (path, step, component) sits at a fixed position of the path's stream.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    const SCALE: f64 = 1.0 / 9007199254740992.0; // 2^-53
    let u1 = ((rng.gen::<u64>() >> 11) as f64 + 0.5) * SCALE;
    let u2 = ((rng.gen::<u64>() >> 11) as f64 + 0.5) * SCALE;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn rng_for_path(seed: u64, path: usize, antithetic: bool) -> (ChaCha8Rng, f64) {
    let (stream, sign) = if antithetic {
        (path / 2, if path % 2 == 0 { 1.0 } else { -1.0 })
    } else {
        (path, 1.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64 + 1);
    (rng, sign)
}

/// One explicit Euler step: x + b dt + sigma dW, with (b, sigma) evaluated on
/// the running prefix. `dw` carries the Brownian increments (variance dt).
pub fn euler_step(
    x: &[f64],
    t: f64,
    dt: f64,
    control: &[f64],
    u: &UncertaintySet,
    prefix: Prefix<'_>,
    dw: &[f64],
) -> Result<Vec<f64>, SimError> {
    let d = u.field.dim();
    let r = u.field.noise_dim();
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * r];
    u.field.drift(control, t, prefix, &mut b)?;
    u.field.diffusion(control, t, prefix, &mut s)?;
    let mut out = vec![0.0; d];
    advance(x, &b, &s, dt, dw, d, r, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite { path: 0, step: 0 });
    }
    Ok(out)
}

#[inline]
fn advance(x: &[f64], b: &[f64], s: &[f64], dt: f64, dw: &[f64], d: usize, r: usize, out: &mut [f64]) {
    for i in 0..d {
        let mut acc = x[i] + b[i] * dt;
        for j in 0..r {
            acc += s[i * r + j] * dw[j];
        }
        out[i] = acc;
    }
}

/// Simulates `cfg.n_paths` trajectories from `start` to the horizon and maps
/// each concatenated path through `map`, in path-index order.
///
/// Coefficients are evaluated on the spliced path (the start prefix followed
/// by the simulated continuation), so path-dependent fields see the true
/// history. Results are deterministic in (seed, config, policy, field)
/// regardless of thread count.
pub fn simulate_map<T: Send>(
    start: &PathPair,
    policy: &Policy,
    u: &UncertaintySet,
    cfg: &SimConfig,
    map: impl Fn(&DiscretePath) -> T + Sync,
) -> Result<Vec<T>, SimError> {
    cfg.validate()?;
    let d = u.field.dim();
    let r = u.field.noise_dim();
    if start.path().dim() != d {
        return Err(SimError::Config(format!(
            "start path dimension {} does not match field dimension {d}",
            start.path().dim()
        )));
    }
    let grid = *start.path().grid();
    let k0 = start.knot();
    let steps = grid.n_steps() - k0;
    if let PolicyRule::OpenLoop(seq) = &policy.rule {
        if seq.len() < steps {
            return Err(SimError::PolicyLength { needed: steps, got: seq.len() });
        }
    }
    let n_controls = u.controls.len();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    (0..cfg.n_paths)
        .into_par_iter()
        .map_init(
            || {
                (
                    start.path().clone(),
                    vec![0.0; d],
                    vec![0.0; d * r],
                    vec![0.0; r],
                    vec![0.0; d],
                )
            },
            |(path, b_buf, s_buf, dw, next), p| {
                let (mut rng, sign) = rng_for_path(cfg.seed, p, cfg.antithetic);
                {
                    let values = path.values_mut();
                    values.copy_from_slice(start.path().values());
                    for step in 0..steps {
                        let k = k0 + step;
                        let t = grid.knot(k);
                        {
                            let prefix = Prefix::new(&grid, &values[..(k + 1) * d], d, k);
                            let state = prefix.current();
                            let index = match &policy.rule {
                                PolicyRule::OpenLoop(seq) => seq[step],
                                PolicyRule::Feedback(rule) => {
                                    rule(&FeedbackCtx { step, knot: k, t, state, prefix })
                                }
                            };
                            if index >= n_controls {
                                return Err(SimError::PolicyIndex {
                                    path: p,
                                    step,
                                    index,
                                    len: n_controls,
                                });
                            }
                            let control = u.controls.point(index)?;
                            u.field.drift(control, t, prefix, b_buf)?;
                            u.field.diffusion(control, t, prefix, s_buf)?;
                        }
                        for w in dw.iter_mut() {
                            *w = sign * sqrt_dt * standard_normal(&mut rng);
                        }
                        let (head, tail) = values.split_at_mut((k + 1) * d);
                        let x = &head[k * d..];
                        advance(x, b_buf, s_buf, dt, dw, d, r, next);
                        if next.iter().any(|v| !v.is_finite()) {
                            return Err(SimError::NonFinite { path: p, step });
                        }
                        tail[..d].copy_from_slice(next);
                    }
                }
                Ok(map(path))
            },
        )
        .collect()
}

/// Simulates a batch with materialized trajectories.
pub fn simulate_controlled(
    start: &PathPair,
    policy: &Policy,
    u: &UncertaintySet,
    cfg: &SimConfig,
) -> Result<SampleBatch, SimError> {
    let paths = simulate_map(start, policy, u, cfg, |p| p.clone())?;
    Ok(SampleBatch { paths, start_knot: start.knot(), seed: cfg.seed })
}

/// Sample mean and standard error of a path functional over a batch.
pub fn estimate_expectation(
    batch: &SampleBatch,
    functional: impl Fn(&DiscretePath) -> f64,
) -> (f64, f64) {
    let values: Vec<f64> = batch.paths.iter().map(functional).collect();
    mean_stderr(&values)
}

/// Streaming version: simulate and reduce the functional without keeping the
/// trajectories.
pub fn expect_functional(
    start: &PathPair,
    policy: &Policy,
    u: &UncertaintySet,
    cfg: &SimConfig,
    functional: impl Fn(&DiscretePath) -> f64 + Sync,
) -> Result<(f64, f64), SimError> {
    let values = simulate_map(start, policy, u, cfg, functional)?;
    Ok(mean_stderr(&values))
}

/// Report of the 2p-th moment of the running sup, with a split-sample
/// stability ratio standing in for a doubling of the path count.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub power_2p: u32,
    /// Sample mean of sup_{s <= T} ||X_s||^{2p} over all paths.
    pub estimate: f64,
    /// Same estimate from the first half of the paths only.
    pub half_estimate: f64,
    /// estimate / half_estimate (1 when both vanish).
    pub ratio: f64,
    pub band: f64,
    pub pass: bool,
}

/// Checks that E[sup_{s<=T} ||X_s||^{2p}] is finite and stable: the estimate
/// from all paths against the estimate from the first half must agree within
/// the multiplicative `band`.
pub fn moment_check(batch: &SampleBatch, p: u32, band: f64) -> MomentReport {
    let horizon = batch.paths[0].grid().horizon();
    let sups: Vec<f64> = batch
        .paths
        .iter()
        .map(|path| path.sup_norm(horizon).expect("horizon knot").powi(2 * p as i32))
        .collect();
    let (estimate, _) = mean_stderr(&sups);
    let (half_estimate, _) = mean_stderr(&sups[..(sups.len() / 2).max(1)]);
    let ratio = if half_estimate == 0.0 && estimate == 0.0 {
        1.0
    } else {
        estimate / half_estimate
    };
    let pass = estimate.is_finite() && ratio.is_finite() && ratio <= band && ratio >= 1.0 / band;
    MomentReport { power_2p: 2 * p, estimate, half_estimate, ratio, band, pass }
}

/// Writes a batch as CSV with columns `path,t,x_1..x_d`.
pub fn write_batch_csv<W: Write>(batch: &SampleBatch, w: &mut W) -> std::io::Result<()> {
    write!(w, "path,t")?;
    let dim = batch.paths[0].dim();
    for j in 0..dim {
        write!(w, ",x_{}", j + 1)?;
    }
    writeln!(w)?;
    for (p, path) in batch.paths.iter().enumerate() {
        for i in 0..path.grid().n_knots() {
            write!(w, "{p},{}", path.grid().knot(i))?;
            for v in path.value(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

const SUM_CHUNK: usize = 1024;

/// Chunked sum with a fixed chunk size, so the reduction order (and the
/// floating-point result) does not depend on how work was scheduled.
pub fn chunked_sum(xs: &[f64]) -> f64 {
    xs.chunks(SUM_CHUNK).map(|c| c.iter().sum::<f64>()).sum()
}

pub fn chunked_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    chunked_sum(xs) / xs.len() as f64
}

/// Sample mean and standard error, with deterministic summation order.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let mean = chunked_mean(xs);
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let sq: f64 = xs
        .chunks(SUM_CHUNK)
        .map(|c| c.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>())
        .sum();
    let var = sq / (xs.len() - 1) as f64;
    (mean, (var / xs.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{
        constant_field, interval_field_const, CoefficientField, ControlSet, DeclaredConstants,
        DiffusionFn, DriftFn,
    };
    use crate::pathspace::TimeGrid;
    use approx::assert_abs_diff_eq;

    fn start_at_zero(n_steps: usize) -> PathPair {
        let grid = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        PathPair::new(DiscretePath::constant(grid, &[0.0]), 0.0).unwrap()
    }

    fn terminal(path: &DiscretePath) -> f64 {
        path.terminal()[0]
    }

    #[test]
    fn euler_step_trivials() {
        let u = constant_field(0.0, 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let w = DiscretePath::constant(grid, &[2.0]);
        let prefix = Prefix::of_path(&w, 0);
        // b = 0, sigma = 0: unchanged
        let next = euler_step(&[2.0], 0.0, 0.25, &[0.0], &u, prefix, &[0.3]).unwrap();
        assert_eq!(next, vec![2.0]);
        // pure drift
        let u = constant_field(3.0, 0.0);
        let next = euler_step(&[2.0], 0.0, 0.25, &[0.0], &u, prefix, &[0.3]).unwrap();
        assert_abs_diff_eq!(next[0], 2.75);
        // pure diffusion with a fixed increment
        let u = constant_field(0.0, 1.0);
        let next = euler_step(&[2.0], 0.0, 0.25, &[0.0], &u, prefix, &[0.3]).unwrap();
        assert_abs_diff_eq!(next[0], 2.3);
    }

    #[test]
    fn unit_drift_reaches_one_exactly() {
        let u = constant_field(1.0, 0.0);
        let start = start_at_zero(20);
        let policy = Policy::constant(0, 20);
        let cfg = SimConfig::new(8, 1);
        let batch = simulate_controlled(&start, &policy, &u, &cfg).unwrap();
        for path in &batch.paths {
            assert_abs_diff_eq!(path.terminal()[0], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn driftless_mean_is_zero_within_three_stderr() {
        let u = constant_field(0.0, 1.0);
        let start = start_at_zero(50);
        let policy = Policy::constant(0, 50);
        let cfg = SimConfig::new(20_000, 7);
        let (mean, stderr) = expect_functional(&start, &policy, &u, &cfg, terminal).unwrap();
        assert!(mean.abs() <= 3.0 * stderr, "mean {mean} stderr {stderr}");
    }

    #[test]
    fn gaussian_call_value_matches_closed_form() {
        // E (sigma W_1)^+ = sigma / sqrt(2 pi)
        let u = constant_field(0.0, 2.0);
        let start = start_at_zero(50);
        let policy = Policy::constant(0, 50);
        let cfg = SimConfig::new(40_000, 11);
        let (mean, stderr) =
            expect_functional(&start, &policy, &u, &cfg, |p| terminal(p).max(0.0)).unwrap();
        let target = 2.0 / (std::f64::consts::TAU).sqrt();
        assert!((mean - target).abs() <= 3.0 * stderr, "mean {mean} target {target}");
    }

    #[test]
    fn estimate_expectation_of_constant_has_zero_stderr() {
        let u = constant_field(0.5, 0.0);
        let start = start_at_zero(10);
        let batch = simulate_controlled(&start, &Policy::constant(0, 10), &u, &SimConfig::new(16, 3)).unwrap();
        let (mean, stderr) = estimate_expectation(&batch, |_| 4.2);
        assert_abs_diff_eq!(mean, 4.2, epsilon = 1e-14);
        assert_abs_diff_eq!(stderr, 0.0, epsilon = 1e-14);
        // deterministic drift: X_T = 0.5 exactly on every path
        let (mean, stderr) = estimate_expectation(&batch, terminal);
        assert_abs_diff_eq!(mean, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(stderr, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn square_root_drift_ode_matches_closed_form() {
        // x' = sgn(x) sqrt|x| from 0.01 reaches (sqrt(0.01) + 1/2)^2 = 0.36
        let drift: Arc<DriftFn> = Arc::new(|_, _, p: Prefix<'_>, out| {
            let x = p.current()[0];
            out[0] = x.signum() * x.abs().sqrt().min(1.0);
            Ok(())
        });
        let diffusion: Arc<DiffusionFn> = Arc::new(|_, _, _, out| {
            out[0] = 0.0;
            Ok(())
        });
        let u = crate::coefficients::UncertaintySet::new(
            ControlSet::new(vec![vec![0.0]]).unwrap(),
            CoefficientField::new(1, 1, drift, diffusion, DeclaredConstants::default()),
        );
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let start = PathPair::new(DiscretePath::constant(grid, &[0.01]), 0.0).unwrap();
        let batch = simulate_controlled(&start, &Policy::constant(0, 200), &u, &SimConfig::new(1, 1)).unwrap();
        let xt = batch.paths[0].terminal()[0];
        assert!((xt - 0.36).abs() < 2.0 / 200.0, "xt = {xt}");
    }

    #[test]
    fn batches_are_bitwise_deterministic_across_thread_counts() {
        let u = interval_field_const(-1.0, 1.0, 0.5, 2.0, 3);
        let start = start_at_zero(30);
        let policy = Policy::random_open_loop(5, 30, u.controls.len());
        let cfg = SimConfig::new(512, 99);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| simulate_map(&start, &policy, &u, &cfg, terminal).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
    }

    #[test]
    fn same_policy_has_exactly_zero_value_difference() {
        // common random numbers: re-running a policy against itself gives a
        // per-path difference of exactly zero
        let u = interval_field_const(-1.0, 1.0, 0.5, 2.0, 3);
        let start = start_at_zero(30);
        let policy = Policy::constant(4, 30);
        let cfg = SimConfig::new(256, 12);
        let a = simulate_map(&start, &policy, &u, &cfg, terminal).unwrap();
        let b = simulate_map(&start, &policy, &u, &cfg, terminal).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x == y));
    }

    #[test]
    fn noise_is_keyed_per_step_not_per_policy_suffix() {
        // policies that agree on the first k steps produce identical prefixes
        let u = interval_field_const(-1.0, 1.0, 0.5, 2.0, 3);
        let start = start_at_zero(20);
        let k = 12;
        let mut seq_a = vec![0usize; 20];
        let mut seq_b = vec![0usize; 20];
        for i in k..20 {
            seq_a[i] = 8;
            seq_b[i] = 4;
        }
        let cfg = SimConfig::new(32, 21);
        let a = simulate_controlled(&start, &Policy::open_loop("a", seq_a), &u, &cfg).unwrap();
        let b = simulate_controlled(&start, &Policy::open_loop("b", seq_b), &u, &cfg).unwrap();
        for (pa, pb) in a.paths.iter().zip(&b.paths) {
            for i in 0..=k {
                assert_eq!(pa.value(i), pb.value(i));
            }
        }
    }

    #[test]
    fn antithetic_pairs_mirror_increments() {
        let u = constant_field(0.0, 1.0);
        let start = start_at_zero(10);
        let cfg = SimConfig { n_paths: 8, seed: 5, antithetic: true };
        let batch = simulate_controlled(&start, &Policy::constant(0, 10), &u, &cfg).unwrap();
        for pair in batch.paths.chunks(2) {
            for i in 0..11 {
                assert_abs_diff_eq!(pair[0].value(i)[0], -pair[1].value(i)[0], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_states_abort_with_step_report() {
        let drift: Arc<DriftFn> = Arc::new(|_, t, _, out| {
            out[0] = if t >= 0.5 { f64::INFINITY } else { 0.0 };
            Ok(())
        });
        let diffusion: Arc<DiffusionFn> = Arc::new(|_, _, _, out| {
            out[0] = 0.0;
            Ok(())
        });
        let u = crate::coefficients::UncertaintySet::new(
            ControlSet::new(vec![vec![0.0]]).unwrap(),
            CoefficientField::new(1, 1, drift, diffusion, DeclaredConstants::default()),
        );
        let start = start_at_zero(10);
        let err = simulate_controlled(&start, &Policy::constant(0, 10), &u, &SimConfig::new(2, 1))
            .unwrap_err();
        match err {
            SimError::NonFinite { step, .. } => assert_eq!(step, 5),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn policy_index_out_of_range_is_reported() {
        let u = constant_field(0.0, 1.0);
        let start = start_at_zero(4);
        let err = simulate_controlled(&start, &Policy::constant(3, 4), &u, &SimConfig::new(1, 1))
            .unwrap_err();
        assert!(matches!(err, SimError::PolicyIndex { index: 3, len: 1, .. }));
    }

    #[test]
    fn moment_check_deterministic_start_is_exactly_one() {
        let u = constant_field(0.0, 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let start = PathPair::new(DiscretePath::constant(grid, &[1.0]), 0.0).unwrap();
        let batch = simulate_controlled(&start, &Policy::constant(0, 10), &u, &SimConfig::new(64, 2)).unwrap();
        let report = moment_check(&batch, 1, 1.5);
        assert_eq!(report.estimate, 1.0);
        assert_eq!(report.ratio, 1.0);
        assert!(report.pass);
    }

    #[test]
    fn moment_check_brownian_sup_square_within_doob_bounds() {
        // 1 = E W_1^2 <= E sup W^2 <= 4 E W_1^2 = 4
        let u = constant_field(0.0, 1.0);
        let start = start_at_zero(100);
        let batch =
            simulate_controlled(&start, &Policy::constant(0, 100), &u, &SimConfig::new(20_000, 31)).unwrap();
        let report = moment_check(&batch, 1, 1.25);
        assert!(report.pass, "{report:?}");
        assert!(report.estimate > 1.0 && report.estimate < 4.0, "{report:?}");
    }

    #[test]
    fn moment_estimates_stable_under_linear_growth_sweep() {
        for amplitude in [0.5, 1.0, 2.0] {
            let u = interval_field_const(-amplitude, amplitude, 0.25, amplitude, 3);
            let start = start_at_zero(50);
            let policy = Policy::constant(u.controls.len() - 1, 50);
            let batch =
                simulate_controlled(&start, &policy, &u, &SimConfig::new(8_000, 17)).unwrap();
            let report = moment_check(&batch, 2, 1.5);
            assert!(report.pass, "amplitude {amplitude}: {report:?}");
        }
    }

    #[test]
    fn zero_volatility_reduces_to_ode_with_order_one_error() {
        // x' = -x from 1: Euler error against e^{-t} is O(dt)
        let drift: Arc<DriftFn> = Arc::new(|_, _, p: Prefix<'_>, out| {
            out[0] = -p.current()[0];
            Ok(())
        });
        let diffusion: Arc<DiffusionFn> = Arc::new(|_, _, _, out| {
            out[0] = 0.0;
            Ok(())
        });
        let u = crate::coefficients::UncertaintySet::new(
            ControlSet::new(vec![vec![0.0]]).unwrap(),
            CoefficientField::new(1, 1, drift, diffusion, DeclaredConstants::default()),
        );
        let mut errors = Vec::new();
        for n in [50usize, 100, 200] {
            let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
            let start = PathPair::new(DiscretePath::constant(grid, &[1.0]), 0.0).unwrap();
            let batch =
                simulate_controlled(&start, &Policy::constant(0, n), &u, &SimConfig::new(1, 1)).unwrap();
            errors.push((batch.paths[0].terminal()[0] - (-1.0f64).exp()).abs());
        }
        assert!(errors[0] < 5e-3);
        // halving dt roughly halves the error
        assert!(errors[2] < 0.6 * errors[1] && errors[1] < 0.6 * errors[0], "{errors:?}");
    }

    #[test]
    fn mean_stderr_matches_direct_formulas() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let (m, se) = mean_stderr(&xs);
        assert_abs_diff_eq!(m, 2.5);
        // sample variance 5/3
        assert_abs_diff_eq!(se, (5.0 / 3.0f64 / 4.0).sqrt(), epsilon = 1e-15);
    }
}
