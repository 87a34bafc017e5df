//! Sublinear expectations of path functionals under drift and volatility
//! uncertainty, evaluated numerically.
//!
//! The engine computes v(t, omega) = sup over admissible laws of
//! E[psi(omega spliced with the simulated continuation)], where the admissible
//! drift/diffusion pairs at each (time, path prefix) range over a compact,
//! finitely discretized control image. On top of the engine sit structural
//! probes: a dynamic-programming (tower property) check, a Markovian HJB
//! finite-difference oracle, Hoelder-modulus and semicontinuity probes,
//! functional derivatives with a generator/viscosity-residual evaluator, and a
//! nonlinear martingale-problem check driven by the extremal (worst-case)
//! policy.

pub mod calculus;
pub mod cli;
pub mod coefficients;
pub mod expectation;
pub mod pathspace;
pub mod simulate;
