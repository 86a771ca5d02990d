//! Weighted-least-squares state estimation and residual-based bad data detection.
//!
//! The estimator minimises `[z - h(x)]' W [z - h(x)]` by Gauss-Newton on the
//! dense gain matrix `H' W H`, halving the step until the objective does not
//! increase. Detection compares the weighted residual norm with
//! `tau = sqrt(chi2_inv(confidence, I - J))`; with unit weights this is the
//! plain Euclidean residual norm.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::grid::{
    measurement_function, measurement_jacobian, GridError, MeasurementSchema, MeasurementVector, NetworkCase,
    StateVector,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimationError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("gain matrix is singular (system unobservable) at iteration {iteration}")]
    SingularGain { iteration: usize },
    #[error("invalid confidence {0}: must lie strictly between 0 and 1")]
    InvalidConfidence(f64),
    #[error("degrees of freedom must be at least 1")]
    NoRedundancy,
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WlsOptions {
    /// Convergence tolerance on the infinity norm of the state update.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for WlsOptions {
    fn default() -> Self {
        WlsOptions { tolerance: 1e-8, max_iterations: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub estimated_state: StateVector,
    /// `||z - h(x')||_2`.
    pub residual_norm: f64,
    /// `sqrt([z - h(x')]' W [z - h(x')])`, the statistic used by the detector.
    pub weighted_residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

fn weighted_objective(residual: &[f64], weights: &[f64]) -> f64 {
    residual.iter().zip(weights).map(|(r, w)| w * r * r).sum()
}

fn residual(z: &MeasurementVector, h: &MeasurementVector) -> Vec<f64> {
    z.values.iter().zip(&h.values).map(|(a, b)| a - b).collect()
}

/// Solves `a x = b` for symmetric positive definite `a`. Returns `None` when a
/// pivot falls below `1e-12` times the largest diagonal entry.
pub(crate) fn cholesky_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    let floor = 1e-12 * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    Some(y)
}

/// Solves `(a + mu I) x = b` for the smallest `mu` in a decade ladder that
/// makes the system positive definite.
fn damped_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let max_diag = (0..a.nrows()).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    (0..10).find_map(|k| {
        let mu = max_diag * 10f64.powi(k - 9);
        let mut damped = a.clone();
        for i in 0..a.nrows() {
            damped[(i, i)] += mu;
        }
        cholesky_solve(&damped, b)
    })
}

/// WLS estimate with default options.
pub fn wls_estimate(
    z: &MeasurementVector,
    case: &NetworkCase,
    schema: &MeasurementSchema,
    init: &StateVector,
) -> Result<EstimationResult, EstimationError> {
    wls_estimate_with(z, case, schema, init, WlsOptions::default())
}

pub fn wls_estimate_with(
    z: &MeasurementVector,
    case: &NetworkCase,
    schema: &MeasurementSchema,
    init: &StateVector,
    options: WlsOptions,
) -> Result<EstimationResult, EstimationError> {
    z.check(schema)?;
    let weights = schema.weights();
    let mut state = init.clone();
    let mut r = residual(z, &measurement_function(&state, case, schema)?);
    let mut objective = weighted_objective(&r, &weights);
    let mut trace = vec![objective];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let jac = measurement_jacobian(&state, case, schema)?;
        let mut weighted_jt = jac.transpose();
        for (col, w) in weights.iter().enumerate() {
            weighted_jt.column_mut(col).scale_mut(*w);
        }
        let gain = &weighted_jt * &jac;
        let rhs = &weighted_jt * DVector::from_column_slice(&r);
        let step = match cholesky_solve(&gain, &rhs) {
            Some(step) => step,
            // A singular gain at the starting point means the schema cannot
            // observe the state. Later on it only means the iterate wandered
            // somewhere degenerate, so fall back to damped steps.
            None if iterations > 1 => damped_solve(&gain, &rhs).ok_or(EstimationError::SingularGain { iteration: iterations })?,
            None => return Err(EstimationError::SingularGain { iteration: iterations }),
        };
        let step_norm = step.amax();
        let x = state.to_vector(case);

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + scale * d).collect();
            let candidate = StateVector::from_vector(&trial, case)?;
            if candidate.voltage_mag.iter().all(|&v| v > 0.0) {
                let h_new = measurement_function(&candidate, case, schema)?;
                let r_new = residual(z, &h_new);
                let obj_new = weighted_objective(&r_new, &weights);
                if obj_new <= objective {
                    accepted = Some((candidate, r_new, obj_new));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((candidate, r_new, obj_new)) => {
                state = candidate;
                r = r_new;
                objective = obj_new;
                trace.push(objective);
                if scale * step_norm < options.tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                // No decrease along the Gauss-Newton direction: either at the
                // minimum up to round-off or stuck.
                converged = step_norm < options.tolerance;
                break;
            }
        }
    }
    Ok(EstimationResult {
        estimated_state: state,
        residual_norm: r.iter().map(|v| v * v).sum::<f64>().sqrt(),
        weighted_residual_norm: objective.sqrt(),
        iterations,
        converged,
        objective_trace: trace,
    })
}

/// `||z - h(x_hat)||_2`.
pub fn residual_norm(
    z: &MeasurementVector,
    x_hat: &StateVector,
    case: &NetworkCase,
    schema: &MeasurementSchema,
) -> Result<f64, EstimationError> {
    z.check(schema)?;
    let h = measurement_function(x_hat, case, schema)?;
    Ok(residual(z, &h).iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `sqrt([z - h(x_hat)]' W [z - h(x_hat)])`.
pub fn weighted_residual_norm(
    z: &MeasurementVector,
    x_hat: &StateVector,
    case: &NetworkCase,
    schema: &MeasurementSchema,
) -> Result<f64, EstimationError> {
    z.check(schema)?;
    let h = measurement_function(x_hat, case, schema)?;
    Ok(weighted_objective(&residual(z, &h), &schema.weights()).sqrt())
}

/// Detection threshold on the residual norm: the square root of the chi-square
/// quantile at `confidence` with `dof` degrees of freedom.
pub fn chi_square_threshold(dof: usize, confidence: f64) -> Result<f64, EstimationError> {
    if dof < 1 {
        return Err(EstimationError::NoRedundancy);
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EstimationError::InvalidConfidence(confidence));
    }
    let dist = ChiSquared::new(dof as f64).map_err(|_| EstimationError::NoRedundancy)?;
    Ok(dist.inverse_cdf(confidence).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BddConfig {
    pub confidence: f64,
    pub threshold: f64,
    pub degrees_of_freedom: usize,
}

impl BddConfig {
    /// Threshold derived from the schema redundancy `I - J`.
    pub fn for_schema(case: &NetworkCase, schema: &MeasurementSchema, confidence: f64) -> Result<Self, EstimationError> {
        let dof = schema.len().checked_sub(case.state_dim()).ok_or(EstimationError::NoRedundancy)?;
        Ok(BddConfig {
            confidence,
            threshold: chi_square_threshold(dof, confidence)?,
            degrees_of_freedom: dof,
        })
    }

    /// User-set threshold; `confidence` is recorded but not used.
    pub fn with_threshold(threshold: f64, degrees_of_freedom: usize, confidence: f64) -> Result<Self, EstimationError> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(EstimationError::InvalidThreshold(threshold));
        }
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(EstimationError::InvalidConfidence(confidence));
        }
        Ok(BddConfig { confidence, threshold, degrees_of_freedom })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BddOutcome {
    Normal,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BddReport {
    pub outcome: BddOutcome,
    pub statistic: f64,
    pub threshold: f64,
    pub estimate: EstimationResult,
}

/// Single-pass residual test from a flat start.
pub fn bdd_check(
    z: &MeasurementVector,
    case: &NetworkCase,
    schema: &MeasurementSchema,
    config: &BddConfig,
) -> Result<BddReport, EstimationError> {
    if !(config.threshold > 0.0) {
        return Err(EstimationError::InvalidThreshold(config.threshold));
    }
    let estimate = wls_estimate(z, case, schema, &StateVector::flat(case.num_buses()))?;
    let statistic = estimate.weighted_residual_norm;
    let outcome = if statistic > config.threshold { BddOutcome::Flagged } else { BddOutcome::Normal };
    Ok(BddReport { outcome, statistic, threshold: config.threshold, estimate })
}
