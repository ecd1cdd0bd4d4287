//! Derivative-free constrained minimisation.
//!
//! [`minimize`] runs Powell's COBYLA: linear interpolation of the objective
//! and constraints over a simplex of `n + 1` points, steps chosen by a linear
//! program inside a trust region of radius `rho`, and `rho` halved whenever
//! the models stop producing progress. Constraints are feasible when `>= 0`.
//!
//! One iteration is one objective evaluation. The caller can cap them and
//! pass an early-stop predicate that is checked every time the incumbent
//! (best feasible, else least infeasible point) changes.

mod cobyla;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cobyla::Cobyla;

#[derive(Debug, Error, PartialEq)]
pub enum DfoError {
    #[error("objective is not finite at the starting point ({0})")]
    NonFiniteStart(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid bounds for dimension {0}: min must be < max")]
    InvalidBounds(usize),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub rho_begin: f64,
    pub rho_end: f64,
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_iterations: 50, rho_begin: 0.5, rho_end: 1e-4, record_trace: false }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), DfoError> {
        if self.max_iterations == 0 {
            return Err(DfoError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.rho_end > 0.0 && self.rho_end <= self.rho_begin && self.rho_begin.is_finite()) {
            return Err(DfoError::InvalidConfig(format!(
                "need 0 < rho_end <= rho_begin, got {} and {}",
                self.rho_end, self.rho_begin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxIterations,
    Converged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    /// Largest constraint violation at `best_point` (0 when feasible).
    pub best_violation: f64,
    pub iterations_used: usize,
    pub stop_reason: StopReason,
    /// Incumbent objective value after every evaluation, when requested.
    pub trace: Option<Vec<f64>>,
}

/// A constraint function; the point is feasible when it returns `>= 0`.
pub type Constraint<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;

/// Minimises `objective` subject to `constraints`, starting from `x0`.
pub fn minimize<F>(
    mut objective: F,
    constraints: &[Constraint<'_>],
    x0: &[f64],
    config: &SolverConfig,
    early_stop: Option<&mut dyn FnMut(&[f64]) -> bool>,
) -> Result<SolverResult, DfoError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut solver = Cobyla::new(x0.len(), constraints.len(), *config)?;
    solver.minimize(
        |x: &[f64], con: &mut [f64]| {
            for (c, g) in con.iter_mut().zip(constraints) {
                *c = g(x);
            }
            objective(x)
        },
        x0,
        early_stop,
    )
}

/// `2n` constraints keeping every coordinate inside `[-1, 1]`.
pub fn unit_box_constraints<'a>(n: usize) -> Vec<Constraint<'a>> {
    let mut out: Vec<Constraint<'a>> = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push(Box::new(move |x: &[f64]| 1.0 - x[i]));
        out.push(Box::new(move |x: &[f64]| x[i] + 1.0));
    }
    out
}

fn check_bounds(len: usize, bounds: &[(f64, f64)]) -> Result<(), DfoError> {
    if len != bounds.len() {
        return Err(DfoError::DimensionMismatch { expected: bounds.len(), got: len });
    }
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo < hi) {
            return Err(DfoError::InvalidBounds(i));
        }
    }
    Ok(())
}

/// Maps each coordinate affinely from `[min, max]` onto `[-1, 1]`.
pub fn normalize(point: &[f64], bounds: &[(f64, f64)]) -> Result<Vec<f64>, DfoError> {
    check_bounds(point.len(), bounds)?;
    Ok(point.iter().zip(bounds).map(|(&v, &(lo, hi))| (2.0 * v - (lo + hi)) / (hi - lo)).collect())
}

/// Inverse of [`normalize`].
pub fn denormalize(point: &[f64], bounds: &[(f64, f64)]) -> Result<Vec<f64>, DfoError> {
    check_bounds(point.len(), bounds)?;
    Ok(point.iter().zip(bounds).map(|(&u, &(lo, hi))| 0.5 * (lo + hi) + 0.5 * u * (hi - lo)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(budget: usize) -> SolverConfig {
        SolverConfig { max_iterations: budget, record_trace: true, ..SolverConfig::default() }
    }

    #[test]
    fn one_d_quadratic_converges() {
        let r = minimize(|x| (x[0] - 3.0).powi(2), &[], &[0.0], &cfg(200), None).unwrap();
        assert!((r.best_point[0] - 3.0).abs() < 1e-3, "{:?}", r);
        assert_eq!(r.stop_reason, StopReason::Converged);
        assert!(r.iterations_used <= 200);
    }

    #[test]
    fn active_lower_bound() {
        let cons: Vec<Constraint> = vec![Box::new(|x: &[f64]| x[0] - 1.0)];
        let r = minimize(|x| x[0], &cons, &[5.0], &cfg(200), None).unwrap();
        assert!((r.best_point[0] - 1.0).abs() < 1e-3, "{:?}", r);
        assert!(r.best_violation <= 1e-12);
    }

    #[test]
    fn early_stop_fires_on_incumbent() {
        let mut pred = |x: &[f64]| (x[0] - 3.0).powi(2) < 0.5;
        let r = minimize(|x| (x[0] - 3.0).powi(2), &[], &[0.0], &cfg(200), Some(&mut pred)).unwrap();
        assert_eq!(r.stop_reason, StopReason::EarlyStop);
        assert!(r.best_value < 0.5);
    }

    #[test]
    fn early_stop_at_start_costs_one_evaluation() {
        let mut pred = |_: &[f64]| true;
        let r = minimize(|x| x[0] * x[0], &[], &[0.1, 0.2], &cfg(50), Some(&mut pred)).unwrap();
        assert_eq!(r.iterations_used, 1);
        assert_eq!(r.best_point, vec![0.1, 0.2]);
    }

    #[test]
    fn budget_is_respected_exactly() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (v - i as f64).powi(2)).sum::<f64>();
        for budget in [1, 2, 7, 30] {
            let r = minimize(f, &[], &[0.0; 6], &cfg(budget), None).unwrap();
            assert_eq!(r.iterations_used, budget);
            assert_eq!(r.stop_reason, StopReason::MaxIterations);
            assert_eq!(r.trace.unwrap().len(), budget);
        }
    }

    #[test]
    fn trace_never_increases() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + 10.0 * (x[1] + x[0] * x[0]).powi(2);
        let r = minimize(f, &unit_box_constraints(2), &[0.9, 0.9], &cfg(300), None).unwrap();
        let t = r.trace.unwrap();
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*t.last().unwrap(), r.best_value);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let r = minimize(|_| f64::NAN, &[], &[0.0], &cfg(10), None);
        assert!(matches!(r, Err(DfoError::NonFiniteStart(_))));
    }

    #[test]
    fn non_finite_during_search_is_survived() {
        let f = |x: &[f64]| if x[0] > 0.25 { f64::INFINITY } else { (x[0] - 0.2).powi(2) };
        let r = minimize(f, &[], &[0.0], &cfg(100), None).unwrap();
        assert!(r.best_value.is_finite());
        assert!(r.best_point[0] <= 0.25);
    }

    #[test]
    fn deterministic() {
        let f = |x: &[f64]| (x[0] - 0.1).powi(2) + (x[1] + 0.4).powi(4) + x[0] * x[1];
        let a = minimize(f, &unit_box_constraints(2), &[0.5, 0.5], &cfg(80), None).unwrap();
        let b = minimize(f, &unit_box_constraints(2), &[0.5, 0.5], &cfg(80), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config_and_dimensions() {
        let bad = SolverConfig { max_iterations: 0, ..SolverConfig::default() };
        assert!(minimize(|x| x[0], &[], &[0.0], &bad, None).is_err());
        let bad = SolverConfig { rho_end: 1.0, rho_begin: 0.5, ..SolverConfig::default() };
        assert!(minimize(|x| x[0], &[], &[0.0], &bad, None).is_err());
    }

    #[test]
    fn normalize_examples() {
        let b = [(-5.0, 5.0), (-0.52, 0.52)];
        assert_eq!(normalize(&[-5.0, -0.52], &b).unwrap(), vec![-1.0, -1.0]);
        assert_eq!(normalize(&[0.0, 0.0], &b).unwrap(), vec![0.0, 0.0]);
        assert_eq!(denormalize(&[1.0, 1.0], &b).unwrap(), vec![5.0, 0.52]);
        assert!(matches!(normalize(&[0.0], &b), Err(DfoError::DimensionMismatch { expected: 2, got: 1 })));
        assert!(matches!(normalize(&[0.0], &[(1.0, 1.0)]), Err(DfoError::InvalidBounds(0))));
    }
}
