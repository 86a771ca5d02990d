//! Nonlinear measurement model `h(x)` and its analytic Jacobian.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{GridError, NetworkCase};

/// Bus voltages in polar form. The slack angle is held at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub voltage_mag: Vec<f64>,
    pub voltage_ang: Vec<f64>,
}

impl StateVector {
    /// All magnitudes 1.0 p.u., all angles zero.
    pub fn flat(num_buses: usize) -> Self {
        StateVector {
            voltage_mag: vec![1.0; num_buses],
            voltage_ang: vec![0.0; num_buses],
        }
    }

    pub fn num_buses(&self) -> usize {
        self.voltage_mag.len()
    }

    /// Packs into the `2N - 1` estimation vector: non-slack angles, then magnitudes.
    pub fn to_vector(&self, case: &NetworkCase) -> Vec<f64> {
        let mut out = Vec::with_capacity(case.state_dim());
        for (i, &a) in self.voltage_ang.iter().enumerate() {
            if i != case.slack_bus {
                out.push(a);
            }
        }
        out.extend_from_slice(&self.voltage_mag);
        out
    }

    pub fn from_vector(values: &[f64], case: &NetworkCase) -> Result<Self, GridError> {
        let n = case.num_buses();
        if values.len() != case.state_dim() {
            return Err(GridError::DimensionMismatch {
                what: "state vector",
                expected: case.state_dim(),
                found: values.len(),
            });
        }
        let mut voltage_ang = Vec::with_capacity(n);
        let mut k = 0;
        for i in 0..n {
            if i == case.slack_bus {
                voltage_ang.push(0.0);
            } else {
                voltage_ang.push(values[k]);
                k += 1;
            }
        }
        Ok(StateVector {
            voltage_mag: values[n - 1..].to_vec(),
            voltage_ang,
        })
    }

    /// Adds a `2N - 1` deviation vector.
    pub fn offset(&self, deviation: &[f64], case: &NetworkCase) -> Result<Self, GridError> {
        let mut v = self.to_vector(case);
        if deviation.len() != v.len() {
            return Err(GridError::DimensionMismatch {
                what: "state deviation",
                expected: v.len(),
                found: deviation.len(),
            });
        }
        for (x, d) in v.iter_mut().zip(deviation) {
            *x += d;
        }
        Self::from_vector(&v, case)
    }

    pub(crate) fn check(&self, case: &NetworkCase) -> Result<(), GridError> {
        let n = case.num_buses();
        if self.voltage_mag.len() != n || self.voltage_ang.len() != n {
            return Err(GridError::DimensionMismatch {
                what: "state buses",
                expected: n,
                found: self.voltage_mag.len().min(self.voltage_ang.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasurementKind {
    PInjection,
    QInjection,
    PFlow,
    QFlow,
}

impl MeasurementKind {
    pub fn tag(self) -> &'static str {
        match self {
            MeasurementKind::PInjection => "P_inj",
            MeasurementKind::QInjection => "Q_inj",
            MeasurementKind::PFlow => "P_flow",
            MeasurementKind::QFlow => "Q_flow",
        }
    }

    pub fn is_injection(self) -> bool {
        matches!(self, MeasurementKind::PInjection | MeasurementKind::QInjection)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchEnd {
    From,
    To,
}

/// Where a measurement is taken. Buses and branches are internal positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasurementLocation {
    Bus(usize),
    Branch { branch: usize, end: BranchEnd },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementEntry {
    pub kind: MeasurementKind,
    pub location: MeasurementLocation,
    /// Inverse error variance.
    pub weight: f64,
}

impl MeasurementEntry {
    /// Human-readable name using external bus labels, e.g. `P_flow@3-4`.
    pub fn label(&self, case: &NetworkCase) -> String {
        match self.location {
            MeasurementLocation::Bus(b) => format!("{}@{}", self.kind.tag(), case.bus_label(b)),
            MeasurementLocation::Branch { branch, end } => {
                let br = &case.branches[branch];
                let (i, j) = match end {
                    BranchEnd::From => (br.from_bus, br.to_bus),
                    BranchEnd::To => (br.to_bus, br.from_bus),
                };
                format!("{}@{}-{}#{}", self.kind.tag(), case.bus_label(i), case.bus_label(j), branch)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSchema {
    pub entries: Vec<MeasurementEntry>,
}

impl MeasurementSchema {
    /// P and Q injection at every bus, then P and Q flow at the from-end of
    /// every branch, all with standard deviation `sigma`.
    pub fn default_for(case: &NetworkCase, sigma: f64) -> Self {
        let weight = 1.0 / (sigma * sigma);
        let n = case.num_buses();
        let mut entries = Vec::with_capacity(2 * n + 2 * case.branches.len());
        for kind in [MeasurementKind::PInjection, MeasurementKind::QInjection] {
            for bus in 0..n {
                entries.push(MeasurementEntry { kind, location: MeasurementLocation::Bus(bus), weight });
            }
        }
        for kind in [MeasurementKind::PFlow, MeasurementKind::QFlow] {
            for branch in 0..case.branches.len() {
                entries.push(MeasurementEntry {
                    kind,
                    location: MeasurementLocation::Branch { branch, end: BranchEnd::From },
                    weight,
                });
            }
        }
        MeasurementSchema { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    /// Position of the entry with this kind and location.
    pub fn find(&self, kind: MeasurementKind, location: MeasurementLocation) -> Option<usize> {
        self.entries.iter().position(|e| e.kind == kind && e.location == location)
    }

    /// Checks weights, location references and the counting condition `I >= J`.
    pub fn validate(&self, case: &NetworkCase) -> Result<(), GridError> {
        for (k, e) in self.entries.iter().enumerate() {
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(GridError::Validation(format!("measurement {k} has non-positive weight")));
            }
            let ok = match (e.kind.is_injection(), e.location) {
                (true, MeasurementLocation::Bus(b)) => b < case.num_buses(),
                (false, MeasurementLocation::Branch { branch, .. }) => branch < case.branches.len(),
                _ => false,
            };
            if !ok {
                return Err(GridError::Validation(format!("measurement {k} has an invalid location")));
            }
        }
        if self.entries.len() < case.state_dim() {
            return Err(GridError::Validation(format!(
                "{} measurements cannot observe {} state variables",
                self.entries.len(),
                case.state_dim()
            )));
        }
        Ok(())
    }

    /// Short description recorded alongside datasets and reports.
    pub fn describe(&self, case: &NetworkCase) -> String {
        let count = |k: MeasurementKind| self.entries.iter().filter(|e| e.kind == k).count();
        format!(
            "{}: {} P_inj, {} Q_inj, {} P_flow, {} Q_flow (I={}, J={})",
            case.name,
            count(MeasurementKind::PInjection),
            count(MeasurementKind::QInjection),
            count(MeasurementKind::PFlow),
            count(MeasurementKind::QFlow),
            self.entries.len(),
            case.state_dim()
        )
    }
}

/// Measured values, one per schema entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementVector {
    pub values: Vec<f64>,
}

impl MeasurementVector {
    pub fn new(values: Vec<f64>) -> Self {
        MeasurementVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, schema: &MeasurementSchema) -> Result<(), GridError> {
        if self.values.len() != schema.len() {
            return Err(GridError::DimensionMismatch {
                what: "measurement vector",
                expected: schema.len(),
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for MeasurementVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        write!(f, "]")
    }
}

/// Active and reactive injection at `bus`.
pub fn bus_injection(state: &StateVector, case: &NetworkCase, bus: usize) -> (f64, f64) {
    let y = case.admittance();
    let (vi, ti) = (state.voltage_mag[bus], state.voltage_ang[bus]);
    let mut p = vi * vi * y.g(bus, bus);
    let mut q = -vi * vi * y.b(bus, bus);
    for &j in y.neighbors(bus) {
        let (g, b) = (y.g(bus, j), y.b(bus, j));
        let t = ti - state.voltage_ang[j];
        let (s, c) = t.sin_cos();
        let vv = vi * state.voltage_mag[j];
        p += vv * (g * c + b * s);
        q += vv * (g * s - b * c);
    }
    (p, q)
}

/// Endpoints `(i, j)` as seen from the measured end, with the series admittance
/// and the line-end shunt susceptance (half the charging).
fn branch_view(case: &NetworkCase, branch: usize, end: BranchEnd) -> (usize, usize, f64, f64, f64) {
    let br = &case.branches[branch];
    let (i, j) = match end {
        BranchEnd::From => (br.from_bus, br.to_bus),
        BranchEnd::To => (br.to_bus, br.from_bus),
    };
    (i, j, br.series_g, br.series_b, br.charging_b / 2.0)
}

/// Active and reactive flow on `branch` measured at `end`.
pub fn branch_flow(state: &StateVector, case: &NetworkCase, branch: usize, end: BranchEnd) -> (f64, f64) {
    let (i, j, g, b, bs) = branch_view(case, branch, end);
    let (vi, vj) = (state.voltage_mag[i], state.voltage_mag[j]);
    let (s, c) = (state.voltage_ang[i] - state.voltage_ang[j]).sin_cos();
    let p = vi * vi * g - vi * vj * (g * c + b * s);
    let q = -vi * vi * (bs + b) - vi * vj * (g * s - b * c);
    (p, q)
}

/// Evaluates `h(x)` for every schema entry.
pub fn measurement_function(
    state: &StateVector,
    case: &NetworkCase,
    schema: &MeasurementSchema,
) -> Result<MeasurementVector, GridError> {
    state.check(case)?;
    let n = case.num_buses();
    let mut injections: Vec<Option<(f64, f64)>> = vec![None; n];
    let mut values = Vec::with_capacity(schema.len());
    for e in &schema.entries {
        let v = match e.location {
            MeasurementLocation::Bus(bus) => {
                let (p, q) = *injections[bus].get_or_insert_with(|| bus_injection(state, case, bus));
                match e.kind {
                    MeasurementKind::PInjection => p,
                    MeasurementKind::QInjection => q,
                    _ => return Err(GridError::Validation("flow measurement at a bus".into())),
                }
            }
            MeasurementLocation::Branch { branch, end } => {
                let (p, q) = branch_flow(state, case, branch, end);
                match e.kind {
                    MeasurementKind::PFlow => p,
                    MeasurementKind::QFlow => q,
                    _ => return Err(GridError::Validation("injection measurement on a branch".into())),
                }
            }
        };
        values.push(v);
    }
    Ok(MeasurementVector { values })
}

/// Dense `I x J` matrix of analytic partial derivatives of `h` with respect to
/// the packed state (non-slack angles, then magnitudes).
pub fn measurement_jacobian(
    state: &StateVector,
    case: &NetworkCase,
    schema: &MeasurementSchema,
) -> Result<DMatrix<f64>, GridError> {
    state.check(case)?;
    let mut h = DMatrix::zeros(schema.len(), case.state_dim());
    let y = case.admittance();
    let vm = &state.voltage_mag;
    let va = &state.voltage_ang;
    let put = |row: usize, bus: usize, d_ang: f64, d_mag: f64, h: &mut DMatrix<f64>| {
        if let Some(col) = case.angle_column(bus) {
            h[(row, col)] += d_ang;
        }
        h[(row, case.magnitude_column(bus))] += d_mag;
    };
    for (row, e) in schema.entries.iter().enumerate() {
        match (e.kind, e.location) {
            (MeasurementKind::PInjection, MeasurementLocation::Bus(i)) => {
                let mut d_ang_i = 0.0;
                let mut d_mag_i = 2.0 * vm[i] * y.g(i, i);
                for &j in y.neighbors(i) {
                    let (g, b) = (y.g(i, j), y.b(i, j));
                    let (s, c) = (va[i] - va[j]).sin_cos();
                    d_ang_i += vm[i] * vm[j] * (-g * s + b * c);
                    d_mag_i += vm[j] * (g * c + b * s);
                    put(row, j, vm[i] * vm[j] * (g * s - b * c), vm[i] * (g * c + b * s), &mut h);
                }
                put(row, i, d_ang_i, d_mag_i, &mut h);
            }
            (MeasurementKind::QInjection, MeasurementLocation::Bus(i)) => {
                let bii = y.b(i, i);
                let mut d_ang_i = 0.0;
                let mut d_mag_i = -2.0 * vm[i] * bii;
                for &j in y.neighbors(i) {
                    let (g, b) = (y.g(i, j), y.b(i, j));
                    let (s, c) = (va[i] - va[j]).sin_cos();
                    d_ang_i += vm[i] * vm[j] * (g * c + b * s);
                    d_mag_i += vm[j] * (g * s - b * c);
                    put(row, j, -vm[i] * vm[j] * (g * c + b * s), vm[i] * (g * s - b * c), &mut h);
                }
                put(row, i, d_ang_i, d_mag_i, &mut h);
            }
            (MeasurementKind::PFlow, MeasurementLocation::Branch { branch, end }) => {
                let (i, j, g, b, _) = branch_view(case, branch, end);
                let (s, c) = (va[i] - va[j]).sin_cos();
                let d_ang = vm[i] * vm[j] * (g * s - b * c);
                put(row, i, d_ang, -vm[j] * (g * c + b * s) + 2.0 * vm[i] * g, &mut h);
                put(row, j, -d_ang, -vm[i] * (g * c + b * s), &mut h);
            }
            (MeasurementKind::QFlow, MeasurementLocation::Branch { branch, end }) => {
                let (i, j, g, b, bs) = branch_view(case, branch, end);
                let (s, c) = (va[i] - va[j]).sin_cos();
                let d_ang = -vm[i] * vm[j] * (g * c + b * s);
                put(row, i, d_ang, -vm[j] * (g * s - b * c) - 2.0 * vm[i] * (bs + b), &mut h);
                put(row, j, -d_ang, -vm[i] * (g * s - b * c), &mut h);
            }
            _ => return Err(GridError::Validation(format!("measurement {row} has an invalid location"))),
        }
    }
    Ok(h)
}
