//! Network model: case files, admittances, the measurement function `h(x)`,
//! its Jacobian, and an AC power-flow solver.

mod case;
mod measurement;
mod powerflow;

pub use case::{load_case, parse_case, Admittance, BranchRecord, BusRecord, GeneratorRecord, NetworkCase};
pub use measurement::{
    branch_flow, bus_injection, measurement_function, measurement_jacobian, BranchEnd, MeasurementEntry,
    MeasurementKind, MeasurementLocation, MeasurementSchema, MeasurementVector, StateVector,
};
pub use powerflow::solve_power_flow;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid case: {0}")]
    Validation(String),
    #[error("{what}: expected length {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("power flow diverged: {0}")]
    PowerFlowDiverged(String),
    #[error("i/o error: {0}")]
    Io(String),
}
