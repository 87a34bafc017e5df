//! Empirical regularity probes for the value function: the Hoelder-modulus
//! ratio over sampled (time, path) pairs, and value convergence along a
//! sequence of starting pairs (semicontinuity).

use serde::Serialize;

use crate::coefficients::UncertaintySet;
use crate::pathspace::{holder_distance, PathPair};

use super::{upper_expectation, EngineConfig, EngineError, Payoff};

/// Pairs closer than this in the Hoelder denominator are skipped: their
/// ratio is dominated by Monte Carlo noise rather than the modulus.
pub const HOLDER_DENOMINATOR_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Serialize)]
pub struct HolderReport {
    /// |v(t, omega) - v(s, alpha)| / (|t-s|^{1/2} + stopped sup distance).
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
    /// Largest Monte Carlo stderr among the evaluated values.
    pub max_stderr: f64,
}

/// Evaluates the Hoelder-modulus ratio of the engine value over the supplied
/// pairs. Requires the field to declare the uniform bound and Lipschitz
/// constant that the modulus estimate rests on.
pub fn holder_modulus_probe(
    pairs: &[(PathPair, PathPair)],
    psi: &Payoff,
    u: &UncertaintySet,
    cfg: &EngineConfig,
) -> Result<HolderReport, EngineError> {
    if u.field.constants.bound.is_none() || u.field.constants.lipschitz.is_none() {
        return Err(EngineError::Precondition(
            "holder probe needs declared bound and lipschitz constants (run the condition audits)"
                .into(),
        ));
    }
    let mut ratios = Vec::new();
    let mut skipped = 0usize;
    let mut max_stderr = 0.0_f64;
    for (p, q) in pairs {
        let den = holder_distance(p, q)?;
        if den < HOLDER_DENOMINATOR_FLOOR {
            skipped += 1;
            continue;
        }
        let vp = upper_expectation(p, psi, u, cfg)?;
        let vq = upper_expectation(q, psi, u, cfg)?;
        max_stderr = max_stderr.max(vp.stderr).max(vq.stderr);
        ratios.push((vp.value - vq.value).abs() / den);
    }
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(HolderReport {
        pairs_used: ratios.len(),
        pairs_skipped: skipped,
        ratios,
        max_ratio,
        max_stderr,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SemicontinuityReport {
    pub sequence_values: Vec<f64>,
    pub sequence_stderrs: Vec<f64>,
    pub limit_value: f64,
    pub limit_stderr: f64,
    /// Mean of the last few sequence values minus the value at the limit.
    pub tail_gap: f64,
    pub tolerance: f64,
    /// Set when the sequence values stay below the limit value by more than
    /// the tolerance — the lower-semicontinuity failure mode.
    pub lsc_violated: bool,
}

/// Evaluates v along a sequence of starting pairs converging to `limit` and
/// compares the tail against v(limit).
pub fn semicontinuity_probe(
    sequence: &[PathPair],
    limit: &PathPair,
    psi: &Payoff,
    u: &UncertaintySet,
    cfg: &EngineConfig,
    tolerance: f64,
) -> Result<SemicontinuityReport, EngineError> {
    if sequence.is_empty() {
        return Err(EngineError::Precondition("empty sequence".into()));
    }
    let mut values = Vec::with_capacity(sequence.len());
    let mut stderrs = Vec::with_capacity(sequence.len());
    for p in sequence {
        let v = upper_expectation(p, psi, u, cfg)?;
        values.push(v.value);
        stderrs.push(v.stderr);
    }
    let vl = upper_expectation(limit, psi, u, cfg)?;
    let tail_n = values.len().min(3);
    let tail: f64 = values[values.len() - tail_n..].iter().sum::<f64>() / tail_n as f64;
    let tail_gap = tail - vl.value;
    Ok(SemicontinuityReport {
        sequence_values: values,
        sequence_stderrs: stderrs,
        limit_value: vl.value,
        limit_stderr: vl.stderr,
        tail_gap,
        tolerance,
        lsc_violated: tail_gap < -tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::interval_field_const;
    use crate::pathspace::{DiscretePath, TimeGrid};
    use crate::simulate::SimConfig;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 32).unwrap()
    }

    fn cheap_cfg(seed: u64) -> EngineConfig {
        let mut cfg = EngineConfig::new(SimConfig::new(2000, seed));
        cfg.optimizer = super::super::Optimizer::Constants;
        cfg
    }

    #[test]
    fn identical_pairs_are_excluded() {
        let u = interval_field_const(-0.5, 0.5, 0.5, 1.0, 3);
        let w = PathPair::new(DiscretePath::constant(grid(), &[0.0]), 0.25).unwrap();
        let report =
            holder_modulus_probe(&[(w.clone(), w.clone())], &Payoff::clamp(-1.0, 1.0), &u, &cheap_cfg(1))
                .unwrap();
        assert_eq!(report.pairs_used, 0);
        assert_eq!(report.pairs_skipped, 1);
        assert_eq!(report.max_ratio, 0.0);
    }

    #[test]
    fn space_shift_ratio_is_bounded_by_payoff_lipschitz_scale() {
        // pure space shifts under constant bounds: the coupled values differ
        // by at most the payoff Lipschitz constant times the shift
        let u = interval_field_const(-0.5, 0.5, 0.5, 1.0, 3);
        let psi = Payoff::clamp(-1.0, 1.0);
        let cfg = cheap_cfg(5);
        let mut pairs = Vec::new();
        for shift in [0.2, 0.5, 1.0] {
            let a = PathPair::new(DiscretePath::constant(grid(), &[0.0]), 0.5).unwrap();
            let b = PathPair::new(DiscretePath::constant(grid(), &[shift]), 0.5).unwrap();
            pairs.push((a, b));
        }
        let report = holder_modulus_probe(&pairs, &psi, &u, &cfg).unwrap();
        assert_eq!(report.pairs_used, 3);
        // Lipschitz(psi) = 1 and the coupling is exact for constant coefficients;
        // MC noise enters through the per-pair estimates
        assert!(report.max_ratio <= 1.0 + 10.0 * report.max_stderr, "{report:?}");
    }

    #[test]
    fn probe_requires_declared_constants() {
        let u = crate::coefficients::interval_field(
            crate::coefficients::constant_bound(0.0),
            crate::coefficients::constant_bound(0.0),
            crate::coefficients::constant_bound(1.0),
            crate::coefficients::constant_bound(1.0),
            2,
            Default::default(),
        );
        let w = PathPair::new(DiscretePath::constant(grid(), &[0.0]), 0.0).unwrap();
        let err = holder_modulus_probe(&[(w.clone(), w)], &Payoff::call(), &u, &cheap_cfg(1));
        assert!(matches!(err, Err(EngineError::Precondition(_))));
    }

    #[test]
    fn constant_sequence_has_zero_gap() {
        let u = interval_field_const(-0.5, 0.5, 0.5, 1.0, 3);
        let w = PathPair::new(DiscretePath::constant(grid(), &[0.3]), 0.5).unwrap();
        let seq = vec![w.clone(), w.clone(), w.clone()];
        let report =
            semicontinuity_probe(&seq, &w, &Payoff::clamp(-1.0, 1.0), &u, &cheap_cfg(3), 0.05)
                .unwrap();
        assert!(report.tail_gap.abs() <= 1e-12, "{report:?}");
        assert!(!report.lsc_violated);
    }

    #[test]
    fn lipschitz_field_sequence_converges_to_limit_value() {
        // omega^n -> omega in sup norm: values converge within MC noise
        let u = interval_field_const(-0.5, 0.5, 0.5, 1.0, 3);
        let psi = Payoff::clamp(-1.0, 1.0);
        let cfg = cheap_cfg(9);
        let seq: Vec<PathPair> = [0.2, 0.05, 0.0125]
            .iter()
            .map(|&eps| PathPair::new(DiscretePath::constant(grid(), &[eps]), 0.25).unwrap())
            .collect();
        let limit = PathPair::new(DiscretePath::constant(grid(), &[0.0]), 0.25).unwrap();
        let report = semicontinuity_probe(&seq, &limit, &psi, &u, &cfg, 0.05).unwrap();
        assert!(!report.lsc_violated, "{report:?}");
        assert!(report.tail_gap.abs() <= 0.05 + 6.0 * report.limit_stderr, "{report:?}");
    }
}
