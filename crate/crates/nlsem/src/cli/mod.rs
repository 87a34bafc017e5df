//! Experiment harness: the scenario registry, JSON configuration, and
//! machine-readable result emission.
//!
//! `run` executes one named scenario end to end and writes `results.json`
//! (fully deterministic for a given config) plus `run_meta.json` (timing)
//! and scenario CSV artifacts into the output directory. Exit codes encode
//! the outcome for CI: 0 all criteria passed, 1 a criterion failed, 2 the
//! config was rejected.

mod scenarios;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calculus::CalculusError;
use crate::coefficients::{CoefficientError, UncertaintySet};
use crate::expectation::{EngineConfig, EngineError, HjbError, Optimizer, Payoff};
use crate::pathspace::PathError;
use crate::simulate::{SimConfig, SimError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Schema(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Calculus(#[from] CalculusError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
}

impl CliError {
    /// 2 for configuration/usage problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) | CliError::UnknownScenario(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { t0: 0.0, horizon: 1.0, n_steps: 200 }
    }
}

/// Optional engine knobs; anything unset falls back to the scenario default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineOverrides {
    pub optimizer: Option<Optimizer>,
    pub search_paths: Option<usize>,
    pub max_sweeps: Option<usize>,
    pub restarts: Option<usize>,
    pub antithetic: Option<bool>,
}

impl EngineOverrides {
    fn apply(&self, mut cfg: EngineConfig) -> EngineConfig {
        if let Some(o) = self.optimizer {
            cfg.optimizer = o;
        }
        if let Some(s) = self.search_paths {
            cfg.search_paths = s;
        }
        if let Some(s) = self.max_sweeps {
            cfg.max_sweeps = s;
        }
        if let Some(r) = self.restarts {
            cfg.restarts = r;
        }
        if let Some(a) = self.antithetic {
            cfg.sim.antithetic = a;
        }
        cfg
    }
}

/// Field declaration by registry name, for the `custom` scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    /// Singleton drift/volatility.
    Constant { b: f64, sigma: f64 },
    /// Drift in [b_lo, b_hi], diffusion density in [a_lo, a_hi].
    Interval { b_lo: f64, b_hi: f64, a_lo: f64, a_hi: f64 },
    /// Linear delay drift b0(f) x(t) + b1(f) * integral over the window,
    /// with constant volatility factor in [a_lo, a_hi].
    Delay {
        b0_lo: f64,
        b0_hi: f64,
        b1_scale: f64,
        window: f64,
        a_lo: f64,
        a_hi: f64,
    },
    /// Interval bounds modulated by the current state through
    /// 1 / (1 + gain x^2); Markovian, bounded, Lipschitz.
    Markov { b_lo: f64, b_hi: f64, a_lo: f64, a_hi: f64, state_gain: f64 },
    /// Drift and diffusion as expressions of t, x (current value), m (running
    /// sup norm), f0 and f1 (control coordinates in [0, 1]).
    CustomExpression { drift: String, diffusion: String },
}

impl FieldSpec {
    pub fn build(&self, n_controls: usize) -> Result<UncertaintySet, CliError> {
        scenarios::build_field(self, n_controls)
    }
}

/// Terminal payoff declaration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PayoffSpec {
    /// (X_T)^+
    Call,
    /// X_T
    TerminalValue,
    Clamp { lo: f64, hi: f64 },
    Tanh,
    /// An expression of x = X_T.
    Expression { expr: String },
}

impl PayoffSpec {
    pub fn build(&self) -> Result<Payoff, CliError> {
        match self {
            PayoffSpec::Call => Ok(Payoff::call()),
            PayoffSpec::TerminalValue => Ok(Payoff::identity()),
            PayoffSpec::Clamp { lo, hi } => {
                if lo >= hi {
                    return Err(CliError::Schema(format!("clamp bounds out of order: {lo} >= {hi}")));
                }
                Ok(Payoff::clamp(*lo, *hi))
            }
            PayoffSpec::Tanh => {
                Ok(Payoff::terminal("tanh", f64::tanh).with_bound(1.0).with_lipschitz(1.0))
            }
            PayoffSpec::Expression { expr } => {
                let parsed: meval::Expr = expr
                    .parse()
                    .map_err(|e| CliError::Schema(format!("payoff expression: {e}")))?;
                let label = format!("expr[{expr}]");
                Ok(Payoff::terminal(label, move |x| {
                    let mut ctx = meval::Context::new();
                    ctx.var("x", x);
                    parsed.eval_with_context(ctx).unwrap_or(f64::NAN)
                }))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_controls")]
    pub n_controls: usize,
    #[serde(default)]
    pub start_value: f64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub engine: EngineOverrides,
    #[serde(default)]
    pub field: Option<FieldSpec>,
    #[serde(default)]
    pub payoff: Option<PayoffSpec>,
    #[serde(default)]
    pub dump_paths: bool,
}

fn default_paths() -> usize {
    100_000
}

fn default_controls() -> usize {
    3
}

impl ScenarioConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ScenarioConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !REGISTRY.iter().any(|s| s.id == self.scenario) {
            return Err(CliError::UnknownScenario(self.scenario.clone()));
        }
        let g = &self.grid;
        if !(g.t0 >= 0.0 && g.horizon > g.t0 && g.horizon.is_finite()) {
            return Err(CliError::Schema(format!("bad grid: {g:?}")));
        }
        if !(1..=1_000_000).contains(&g.n_steps) {
            return Err(CliError::Schema(format!("n_steps {} out of [1, 1e6]", g.n_steps)));
        }
        if !(1..=100_000_000).contains(&self.paths) {
            return Err(CliError::Schema(format!("paths {} out of [1, 1e8]", self.paths)));
        }
        if !(1..=64).contains(&self.n_controls) {
            return Err(CliError::Schema(format!("n_controls {} out of [1, 64]", self.n_controls)));
        }
        if !self.start_value.is_finite() {
            return Err(CliError::Schema("start_value must be finite".into()));
        }
        Ok(())
    }

    /// Engine config assembled from the scenario defaults and the overrides.
    pub(crate) fn engine_config(&self, default_search: usize, default_sweeps: usize) -> EngineConfig {
        let mut cfg = EngineConfig::new(SimConfig::new(self.paths, self.seed));
        cfg.search_paths = default_search;
        cfg.max_sweeps = default_sweeps;
        cfg.restarts = 0;
        self.engine.apply(cfg)
    }

    /// Hash of the semantic configuration: where the output goes and whether
    /// trajectories are dumped do not change the results.
    pub fn config_hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.out_dir = None;
        semantic.dump_paths = false;
        let canonical = serde_json::to_string(&semantic).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}

/// One acceptance check a scenario ran, with the threshold actually applied.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `<=` or `>=`: how `value` relates to `threshold` on a pass.
    pub direction: String,
    pub pass: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            direction: "<=".into(),
            pass: value <= threshold,
            detail: detail.into(),
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            direction: ">=".into(),
            pass: value >= threshold,
            detail: detail.into(),
        }
    }
}

/// Deterministic record of one scenario run; `results.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub scenario: String,
    pub config_hash: String,
    pub values: BTreeMap<String, serde_json::Value>,
    pub criteria: Vec<CriterionResult>,
    pub pass: bool,
    /// Wall-clock criteria; serialized into run_meta.json so that
    /// results.json stays byte-identical across re-runs.
    #[serde(skip)]
    pub timing_criteria: Vec<CriterionResult>,
}

impl RunRecord {
    pub(crate) fn new(scenario: &str, config_hash: String) -> Self {
        Self {
            scenario: scenario.to_string(),
            config_hash,
            values: BTreeMap::new(),
            criteria: Vec::new(),
            pass: true,
            timing_criteria: Vec::new(),
        }
    }

    pub(crate) fn record(&mut self, key: &str, value: impl Serialize) {
        self.values
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
    }

    pub(crate) fn criterion(&mut self, c: CriterionResult) {
        self.pass &= c.pass;
        self.criteria.push(c);
    }

    pub(crate) fn timing_criterion(&mut self, c: CriterionResult) {
        self.pass &= c.pass;
        self.timing_criteria.push(c);
    }

    /// All criteria, timing included, for reporting.
    pub fn all_criteria(&self) -> impl Iterator<Item = &CriterionResult> {
        self.criteria.iter().chain(self.timing_criteria.iter())
    }
}

pub struct ScenarioInfo {
    pub id: &'static str,
    pub summary: &'static str,
    pub describe: &'static str,
}

/// The scenario registry.
pub const REGISTRY: &[ScenarioInfo] = &[
    ScenarioInfo {
        id: "gheat",
        summary: "volatility uncertainty a in [1,4], call payoff, closed-form and FD cross-checks",
        describe: "Nonlinear heat equation instance: Theta = {0} x [1, 4], psi = (X_T)^+. The \
                   value solves dv/dt + sup_a {a/2 d2v/dx2} = 0; a convex payoff is propagated \
                   by the largest volatility, so v(0, 0) = 2 / sqrt(2 pi) at T = 1. Checked \
                   against the Gaussian closed form and the finite-difference surface.",
    },
    ScenarioInfo {
        id: "drift",
        summary: "drift uncertainty b in [-1,1], terminal payoff, exhaustive argmax check",
        describe: "Drift uncertainty: Theta = [-1, 1] x {1}, psi = X_T. E X_T = integral of the \
                   chosen drift, so the upper expectation is attained by the constant upper \
                   endpoint and equals 1.0 at T = 1. A 2-step/3-control instance is enumerated \
                   exhaustively and must agree with the optimizer's argmax.",
    },
    ScenarioInfo {
        id: "interval",
        summary: "interval uncertainty in both coefficients; sublinearity and monotonicity suite",
        describe: "Interval uncertainty Theta = [b_lo, b_hi] x [a_lo, a_hi] with a clamped \
                   terminal payoff. Runs the nonlinear-expectation invariants under common \
                   random numbers: subadditivity, constant shift, positive homogeneity, \
                   monotonicity in the payoff, monotonicity under control refinement, \
                   feedback >= open-loop, and the singleton reduction.",
    },
    ScenarioInfo {
        id: "delay",
        summary: "linear stochastic delay drift with parameter uncertainty; audits and moments",
        describe: "Linear delay dynamics b(f, t, omega) = b0(f) omega(t) + b1(f) * integral of \
                   omega over [(t - r) v 0, t], constant volatility factor. Exercises the \
                   path-dependent prefix machinery, the linear-growth/Lipschitz/convexity \
                   audits, and the running-sup moment stability check.",
    },
    ScenarioInfo {
        id: "counterexample",
        summary: "square-root drift b(x) = sgn(x) sqrt|x|: value map jumps across zero",
        describe: "Discontinuity counterexample: a = 0 and drift b(x) = sgn(x) sqrt(|x|) \
                   (bounded continuation off [-1, 1]). The flow x(T) = sgn(x0) (sqrt|x0| + T/2)^2 \
                   jumps as x0 crosses 0: with psi = clamp(X_T, -1, 1) the value gap between \
                   x0 = +0.01 and -0.01 is about 0.72, and values along x0 = -1/n stay near \
                   -0.25 while the upper branch sits near +0.25 - continuity fails without a \
                   Lipschitz drift.",
    },
    ScenarioInfo {
        id: "dpp",
        summary: "tower property v(t) = sup E[v(tau, X)] at tau = T/2, nested Monte Carlo",
        describe: "Dynamic programming check: compares v(t, omega) against the best first-stage \
                   policy's average of values restarted at tau = T/2, with reduced inner path \
                   counts. The gap must stay within 3 combined stderr plus a discretization \
                   allowance of 0.5 dt C.",
    },
    ScenarioInfo {
        id: "holder",
        summary: "modulus |v(t,w)-v(s,a)| / (|t-s|^1/2 + sup distance) over sampled pairs",
        describe: "Hoelder-modulus probe on a bounded-Lipschitz interval instance: over sampled \
                   (time, path) pairs the ratio |v(t, omega) - v(s, alpha)| divided by \
                   |t - s|^{1/2} + sup_r ||omega(r ^ t) - alpha(r ^ s)|| stays bounded, and the \
                   max ratio does not grow when the time grid and the control grid are refined.",
    },
    ScenarioInfo {
        id: "martingale",
        summary: "compensated process phi(X) - int G dr is centered under the extremal policy",
        describe: "Nonlinear martingale problem: for increasing convex phi, the compensated \
                   process phi(X_{t ^ rho_n}) - integral of G(r, X, phi) dr has mean zero under \
                   the extremal policy (drift and volatility factors at their pointwise argmax) \
                   and nonpositive drift under any other policy. Run for phi(x) = x and, with a \
                   degenerate drift, phi(x) = x^2.",
    },
    ScenarioInfo {
        id: "hjb-oracle",
        summary: "finite-difference surfaces, viscosity residuals, derivative sweeps",
        describe: "Markovian oracle checks: the Bachelier closed form sigma sqrt((T-t)/(2 pi)), \
                   the coincidence of the a in [1, 4] solve with the a = 4 singleton solve for \
                   convex terminals, exactness on affine profiles, viscosity residuals \
                   dv/dt + sup_f {b dv/dx + a/2 d2v/dx2} shrinking under refinement, and \
                   finite-difference derivative sweeps against analytic values.",
    },
    ScenarioInfo {
        id: "custom",
        summary: "field and payoff from the JSON registry (constant|interval|delay|markov|custom-expression)",
        describe: "Runs the engine on a user-declared field and payoff. Fields come from the \
                   registry: constant, interval, delay, markov (state-modulated bounds), or \
                   custom-expression (drift/diffusion expressions of t, x, m, f0, f1). Declared \
                   regularity constants are audited when present.",
    },
];

pub fn list() -> String {
    let mut out = String::from("available scenarios:\n");
    for s in REGISTRY {
        out.push_str(&format!("  {:<15} {}\n", s.id, s.summary));
    }
    out
}

pub fn describe(id: &str) -> Result<String, CliError> {
    REGISTRY
        .iter()
        .find(|s| s.id == id)
        .map(|s| format!("{}\n\n{}\n", s.id, s.describe))
        .ok_or_else(|| CliError::UnknownScenario(id.to_string()))
}

/// Runs a scenario end to end and writes `results.json`, `run_meta.json` and
/// scenario artifacts under the output directory.
pub fn run(config: &ScenarioConfig) -> Result<RunRecord, CliError> {
    config.validate()?;
    let out_dir = config.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir)?;
    let started = Instant::now();
    let record = scenarios::dispatch(config, &out_dir)?;
    let wall_ms = started.elapsed().as_millis() as u64;

    let results = serde_json::to_string_pretty(&record).expect("record serializes");
    fs::write(out_dir.join("results.json"), results + "\n")?;
    let meta = serde_json::json!({
        "config_hash": record.config_hash,
        "wall_time_ms": wall_ms,
        "timing_criteria": record.timing_criteria,
    });
    fs::write(
        out_dir.join("run_meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta") + "\n",
    )?;
    Ok(record)
}
