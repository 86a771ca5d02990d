//! Network case data and the plain-text case file format.
//!
//! A case file has a `BASE_MVA` line, an optional `SLACK <bus>` line and the
//! sections `BUS`, `BRANCH` and (optionally) `GEN`. Each section header sits on
//! its own line and is followed by whitespace-separated rows:
//!
//! ```text
//! BUS     index load_p_MW load_q_MVAr shunt_g shunt_b
//! BRANCH  from to r x b_charging
//! GEN     bus p_gen_MW v_set
//! ```
//!
//! Bus shunts are given in MW / MVAr consumed at 1.0 p.u. voltage, branch
//! impedances in per-unit. Everything is converted to per-unit on load.
//! Lines starting with `#` are comments.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GridError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    /// External bus label as it appears in the case file.
    pub index: usize,
    pub base_load_p: f64,
    pub base_load_q: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
}

/// Branch between two buses, endpoints stored as internal bus positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub from_bus: usize,
    pub to_bus: usize,
    pub series_g: f64,
    pub series_b: f64,
    pub charging_b: f64,
}

impl BranchRecord {
    /// Builds a branch from its series impedance `r + jx`.
    pub fn from_impedance(from_bus: usize, to_bus: usize, r: f64, x: f64, charging_b: f64) -> Self {
        let denom = r * r + x * x;
        BranchRecord {
            from_bus,
            to_bus,
            series_g: r / denom,
            series_b: -x / denom,
            charging_b,
        }
    }

    /// The other endpoint, or `None` if `bus` is not on this branch.
    pub fn opposite(&self, bus: usize) -> Option<usize> {
        if bus == self.from_bus {
            Some(self.to_bus)
        } else if bus == self.to_bus {
            Some(self.from_bus)
        } else {
            None
        }
    }

    pub fn touches(&self, bus: usize) -> bool {
        self.opposite(bus).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    /// Internal bus position.
    pub bus: usize,
    /// Scheduled active output, per-unit.
    pub p_gen: f64,
    /// Voltage set point, per-unit.
    pub v_set: f64,
}

/// Bus-admittance matrix `G + jB`, stored dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Admittance {
    n: usize,
    g: Vec<f64>,
    b: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
}

impl Admittance {
    fn build(n: usize, buses: &[BusRecord], branches: &[BranchRecord]) -> Self {
        let mut g = vec![0.0; n * n];
        let mut b = vec![0.0; n * n];
        let mut neighbors = vec![Vec::new(); n];
        for (i, bus) in buses.iter().enumerate() {
            g[i * n + i] += bus.shunt_g;
            b[i * n + i] += bus.shunt_b;
        }
        for br in branches {
            let (f, t) = (br.from_bus, br.to_bus);
            g[f * n + f] += br.series_g;
            b[f * n + f] += br.series_b + br.charging_b / 2.0;
            g[t * n + t] += br.series_g;
            b[t * n + t] += br.series_b + br.charging_b / 2.0;
            g[f * n + t] -= br.series_g;
            b[f * n + t] -= br.series_b;
            g[t * n + f] -= br.series_g;
            b[t * n + f] -= br.series_b;
            if !neighbors[f].contains(&t) {
                neighbors[f].push(t);
                neighbors[t].push(f);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Admittance { n, g, b, neighbors }
    }

    #[inline]
    pub fn g(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.n + j]
    }

    #[inline]
    pub fn b(&self, i: usize, j: usize) -> f64 {
        self.b[i * self.n + j]
    }

    /// Buses sharing at least one branch with `bus`, sorted.
    pub fn neighbors(&self, bus: usize) -> &[usize] {
        &self.neighbors[bus]
    }
}

/// A validated network: buses, branches, generators and the slack bus.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub generators: Vec<GeneratorRecord>,
    /// Internal position of the slack bus.
    pub slack_bus: usize,
    admittance: Admittance,
    positions: HashMap<usize, usize>,
}

impl NetworkCase {
    /// Validates the invariants and precomputes the admittance matrix.
    ///
    /// Branch and generator bus references are internal positions into `buses`.
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<BusRecord>,
        branches: Vec<BranchRecord>,
        generators: Vec<GeneratorRecord>,
        slack_bus: usize,
    ) -> Result<Self, GridError> {
        if !(base_mva > 0.0 && base_mva.is_finite()) {
            return Err(GridError::Validation(format!("base_mva must be positive, got {base_mva}")));
        }
        if buses.is_empty() {
            return Err(GridError::Validation("case has no buses".into()));
        }
        let mut positions = HashMap::with_capacity(buses.len());
        for (pos, bus) in buses.iter().enumerate() {
            if positions.insert(bus.index, pos).is_some() {
                return Err(GridError::Validation(format!("duplicate bus index {}", bus.index)));
            }
            let values = [bus.base_load_p, bus.base_load_q, bus.shunt_g, bus.shunt_b];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(GridError::Validation(format!("bus {} has non-finite data", bus.index)));
            }
        }
        let n = buses.len();
        for (k, br) in branches.iter().enumerate() {
            if br.from_bus >= n || br.to_bus >= n {
                return Err(GridError::Validation(format!(
                    "branch {k} references a bus outside the case"
                )));
            }
            if br.from_bus == br.to_bus {
                return Err(GridError::Validation(format!(
                    "branch {k} connects bus {} to itself",
                    buses[br.from_bus].index
                )));
            }
            if ![br.series_g, br.series_b, br.charging_b].iter().all(|v| v.is_finite()) {
                return Err(GridError::Validation(format!("branch {k} has non-finite admittance")));
            }
        }
        if slack_bus >= n {
            return Err(GridError::Validation("slack bus outside the case".into()));
        }
        for gen in &generators {
            if gen.bus >= n {
                return Err(GridError::Validation("generator references a bus outside the case".into()));
            }
            if !(gen.v_set > 0.0) || !gen.p_gen.is_finite() {
                return Err(GridError::Validation(format!(
                    "generator at bus {} has invalid set points",
                    buses[gen.bus].index
                )));
            }
        }
        let admittance = Admittance::build(n, &buses, &branches);
        Ok(NetworkCase {
            name: name.into(),
            base_mva,
            buses,
            branches,
            generators,
            slack_bus,
            admittance,
            positions,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        load_case(path)
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    /// Number of state variables: all magnitudes plus all non-slack angles.
    pub fn state_dim(&self) -> usize {
        2 * self.buses.len() - 1
    }

    pub fn admittance(&self) -> &Admittance {
        &self.admittance
    }

    /// Internal position of the bus with external label `label`.
    pub fn bus_position(&self, label: usize) -> Option<usize> {
        self.positions.get(&label).copied()
    }

    pub fn bus_label(&self, position: usize) -> usize {
        self.buses[position].index
    }

    /// First branch joining the two internal bus positions, in either direction.
    pub fn find_branch(&self, a: usize, b: usize) -> Option<usize> {
        self.branches
            .iter()
            .position(|br| (br.from_bus == a && br.to_bus == b) || (br.from_bus == b && br.to_bus == a))
    }

    /// State-vector column of the angle at `bus`; the slack angle has none.
    pub fn angle_column(&self, bus: usize) -> Option<usize> {
        match bus.cmp(&self.slack_bus) {
            std::cmp::Ordering::Less => Some(bus),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(bus - 1),
        }
    }

    /// State-vector column of the voltage magnitude at `bus`.
    pub fn magnitude_column(&self, bus: usize) -> usize {
        self.buses.len() - 1 + bus
    }

    /// Scheduled generator output per bus, per-unit.
    pub fn scheduled_generation(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.buses.len()];
        for gen in &self.generators {
            out[gen.bus] += gen.p_gen;
        }
        out
    }

    /// Voltage set point per bus for buses with a generator.
    pub fn voltage_setpoints(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; self.buses.len()];
        for gen in &self.generators {
            out[gen.bus] = Some(gen.v_set);
        }
        out
    }

    pub fn base_loads(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.buses.iter().map(|b| b.base_load_p).collect(),
            self.buses.iter().map(|b| b.base_load_q).collect(),
        )
    }
}

impl fmt::Display for NetworkCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} buses, {} branches, slack {})",
            self.name,
            self.buses.len(),
            self.branches.len(),
            self.bus_label(self.slack_bus)
        )
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Bus,
    Branch,
    Gen,
}

fn parse_fields(line: &str, lineno: usize, expected: usize) -> Result<Vec<f64>, GridError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != expected {
        return Err(GridError::Parse {
            line: lineno,
            message: format!("expected {expected} columns, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>().map_err(|_| GridError::Parse {
                line: lineno,
                message: format!("invalid number `{s}`"),
            })
        })
        .collect()
}

fn parse_label(value: f64, lineno: usize) -> Result<usize, GridError> {
    if value < 0.0 || value.fract() != 0.0 {
        return Err(GridError::Parse {
            line: lineno,
            message: format!("bus index must be a non-negative integer, got {value}"),
        });
    }
    Ok(value as usize)
}

/// Parses case text. `name` is used only for display.
pub fn parse_case(text: &str, name: &str) -> Result<NetworkCase, GridError> {
    let mut base_mva: Option<f64> = None;
    let mut slack_label: Option<usize> = None;
    let mut section = Section::None;
    let mut bus_rows: Vec<[f64; 5]> = Vec::new();
    let mut branch_rows: Vec<(usize, [f64; 5])> = Vec::new();
    let mut gen_rows: Vec<(usize, [f64; 3])> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut words = line.split_whitespace();
        let head = words.next().unwrap_or_default();
        match head {
            "BASE_MVA" => {
                let v = words.next().and_then(|s| s.parse::<f64>().ok()).ok_or(GridError::Parse {
                    line: lineno,
                    message: "BASE_MVA needs a numeric value".into(),
                })?;
                base_mva = Some(v);
                continue;
            }
            "SLACK" => {
                let v = words.next().and_then(|s| s.parse::<usize>().ok()).ok_or(GridError::Parse {
                    line: lineno,
                    message: "SLACK needs a bus index".into(),
                })?;
                slack_label = Some(v);
                continue;
            }
            "BUS" => {
                section = Section::Bus;
                continue;
            }
            "BRANCH" => {
                section = Section::Branch;
                continue;
            }
            "GEN" => {
                section = Section::Gen;
                continue;
            }
            _ => {}
        }
        match section {
            Section::None => {
                return Err(GridError::Parse {
                    line: lineno,
                    message: format!("data row outside any section: `{line}`"),
                })
            }
            Section::Bus => {
                let f = parse_fields(line, lineno, 5)?;
                parse_label(f[0], lineno)?;
                bus_rows.push([f[0], f[1], f[2], f[3], f[4]]);
            }
            Section::Branch => {
                let f = parse_fields(line, lineno, 5)?;
                parse_label(f[0], lineno)?;
                parse_label(f[1], lineno)?;
                if f[2] == 0.0 && f[3] == 0.0 {
                    return Err(GridError::Parse {
                        line: lineno,
                        message: "branch impedance r + jx is zero".into(),
                    });
                }
                branch_rows.push((lineno, [f[0], f[1], f[2], f[3], f[4]]));
            }
            Section::Gen => {
                let f = parse_fields(line, lineno, 3)?;
                parse_label(f[0], lineno)?;
                gen_rows.push((lineno, [f[0], f[1], f[2]]));
            }
        }
    }

    let base_mva = base_mva.ok_or_else(|| GridError::Validation("missing BASE_MVA".into()))?;
    if !(base_mva > 0.0) {
        return Err(GridError::Validation(format!("base_mva must be positive, got {base_mva}")));
    }
    let buses: Vec<BusRecord> = bus_rows
        .iter()
        .map(|r| BusRecord {
            index: r[0] as usize,
            base_load_p: r[1] / base_mva,
            base_load_q: r[2] / base_mva,
            shunt_g: r[3] / base_mva,
            shunt_b: r[4] / base_mva,
        })
        .collect();
    let mut positions = HashMap::new();
    for (pos, bus) in buses.iter().enumerate() {
        if positions.insert(bus.index, pos).is_some() {
            return Err(GridError::Validation(format!("duplicate bus index {}", bus.index)));
        }
    }
    let lookup = |label: usize, lineno: usize| -> Result<usize, GridError> {
        positions.get(&label).copied().ok_or_else(|| {
            GridError::Validation(format!("line {lineno}: bus {label} does not exist"))
        })
    };
    let mut branches = Vec::with_capacity(branch_rows.len());
    for (lineno, r) in &branch_rows {
        let from = lookup(r[0] as usize, *lineno)?;
        let to = lookup(r[1] as usize, *lineno)?;
        if from == to {
            return Err(GridError::Validation(format!(
                "line {lineno}: branch connects bus {} to itself",
                r[0]
            )));
        }
        branches.push(BranchRecord::from_impedance(from, to, r[2], r[3], r[4]));
    }
    let mut generators = Vec::with_capacity(gen_rows.len());
    for (lineno, r) in &gen_rows {
        generators.push(GeneratorRecord {
            bus: lookup(r[0] as usize, *lineno)?,
            p_gen: r[1] / base_mva,
            v_set: r[2],
        });
    }
    let slack_bus = match slack_label {
        Some(label) => positions
            .get(&label)
            .copied()
            .ok_or_else(|| GridError::Validation(format!("slack bus {label} does not exist")))?,
        None => 0,
    };
    NetworkCase::new(name, base_mva, buses, branches, generators, slack_bus)
}

/// Reads and validates a case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkCase, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| GridError::Io(format!("{}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    parse_case(&text, &name)
}
