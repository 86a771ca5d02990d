//! Newton-Raphson AC power flow used to turn drawn loads into operating points.
//!
//! Buses carrying a generator are PV buses (scheduled P, fixed |V|), the slack
//! bus holds its set point and angle 0, everything else is PQ. Reactive limits
//! are not enforced.

use nalgebra::{DMatrix, DVector};

use super::measurement::{bus_injection, measurement_jacobian};
use super::{GridError, MeasurementEntry, MeasurementKind, MeasurementLocation, MeasurementSchema};
use super::{NetworkCase, StateVector};

const MAX_ITERATIONS: usize = 30;
const TOLERANCE: f64 = 1e-10;

/// Solves for the state given per-bus active and reactive loads (per-unit).
pub fn solve_power_flow(case: &NetworkCase, load_p: &[f64], load_q: &[f64]) -> Result<StateVector, GridError> {
    let n = case.num_buses();
    if load_p.len() != n || load_q.len() != n {
        return Err(GridError::DimensionMismatch {
            what: "bus loads",
            expected: n,
            found: load_p.len().min(load_q.len()),
        });
    }
    let gen = case.scheduled_generation();
    let setpoints = case.voltage_setpoints();
    let p_spec: Vec<f64> = (0..n).map(|i| gen[i] - load_p[i]).collect();
    let q_spec: Vec<f64> = (0..n).map(|i| -load_q[i]).collect();

    let mut state = StateVector::flat(n);
    for (i, sp) in setpoints.iter().enumerate() {
        if let Some(v) = sp {
            state.voltage_mag[i] = *v;
        }
    }

    // Unknowns: angles of all non-slack buses, magnitudes of PQ buses.
    let p_buses: Vec<usize> = (0..n).filter(|&i| i != case.slack_bus).collect();
    let q_buses: Vec<usize> = (0..n)
        .filter(|&i| i != case.slack_bus && setpoints[i].is_none())
        .collect();
    let weight = 1.0;
    let schema = MeasurementSchema {
        entries: p_buses
            .iter()
            .map(|&b| MeasurementEntry {
                kind: MeasurementKind::PInjection,
                location: MeasurementLocation::Bus(b),
                weight,
            })
            .chain(q_buses.iter().map(|&b| MeasurementEntry {
                kind: MeasurementKind::QInjection,
                location: MeasurementLocation::Bus(b),
                weight,
            }))
            .collect(),
    };
    let columns: Vec<usize> = p_buses
        .iter()
        .map(|&b| case.angle_column(b).expect("non-slack bus has an angle column"))
        .chain(q_buses.iter().map(|&b| case.magnitude_column(b)))
        .collect();
    let dim = columns.len();

    for _ in 0..MAX_ITERATIONS {
        let mut mismatch = DVector::zeros(dim);
        for (k, &b) in p_buses.iter().enumerate() {
            mismatch[k] = p_spec[b] - bus_injection(&state, case, b).0;
        }
        for (k, &b) in q_buses.iter().enumerate() {
            mismatch[p_buses.len() + k] = q_spec[b] - bus_injection(&state, case, b).1;
        }
        if !mismatch.iter().all(|v| v.is_finite()) {
            return Err(GridError::PowerFlowDiverged("non-finite mismatch".into()));
        }
        if mismatch.amax() < TOLERANCE {
            return Ok(state);
        }
        let full = measurement_jacobian(&state, case, &schema)?;
        let jac = DMatrix::from_fn(dim, dim, |r, c| full[(r, columns[c])]);
        let step = jac
            .lu()
            .solve(&mismatch)
            .ok_or_else(|| GridError::PowerFlowDiverged("singular power-flow Jacobian".into()))?;
        for (k, &b) in p_buses.iter().enumerate() {
            state.voltage_ang[b] += step[k];
        }
        for (k, &b) in q_buses.iter().enumerate() {
            state.voltage_mag[b] += step[p_buses.len() + k];
            if !(state.voltage_mag[b] > 0.0) {
                return Err(GridError::PowerFlowDiverged(format!(
                    "voltage at bus {} collapsed",
                    case.bus_label(b)
                )));
            }
        }
    }
    Err(GridError::PowerFlowDiverged(format!("no convergence in {MAX_ITERATIONS} iterations")))
}
