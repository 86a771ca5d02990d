//! Stealthy false-data-injection attacks and labeled dataset generation.
//!
//! An attack shifts the estimated state by a deviation `l` and injects
//! `alpha = h(x' + l) - h(x')`, so the attacked measurements are consistent
//! with the state `x' + l` and the estimator's residual does not move.

mod dataset;
mod generate;

use serde::{Deserialize, Serialize};

use crate::estimation::EstimationError;
use crate::grid::{
    bus_injection, measurement_function, GridError, MeasurementKind, MeasurementLocation, MeasurementSchema,
    MeasurementVector, NetworkCase, StateVector,
};

pub use dataset::{
    client_feature_indices, dataset_csv_bytes, dataset_digest, extract_client_dataset, partition_clients, read_dataset_csv, write_dataset_csv,
    ClientDataset, ClientSpec, DatasetSidecar, DatasetSizes, FeatureLayout, LabeledSample,
};
pub use generate::{
    add_measurement_noise, derive_seed, draw_loads, generate_compromised_samples, generate_normal_samples,
    sample_attack, CompromisedSample, GenerationOptions, OperatingPoint, STREAM_COMPROMISED, STREAM_NOISE,
    STREAM_NORMAL,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("sample {sample}: no usable operating point after {retries} load redraws")]
    PowerFlowRetries { sample: usize, retries: usize },
    #[error("sample {sample}: no {target:?} attack found within {budget} draws")]
    BudgetExceeded {
        sample: usize,
        target: AttackStrength,
        budget: usize,
    },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("branch {branch:?} is not incident to bus {bus}")]
    BranchNotIncident { bus: usize, branch: (usize, usize) },
    #[error("dataset i/o: {0}")]
    Io(String),
}

/// A state deviation `l` in the packed `2N - 1` layout plus the buses it targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub state_deviation: Vec<f64>,
    /// Internal positions of the attacked buses.
    pub target_buses: Vec<usize>,
}

impl AttackSpec {
    pub fn zero(case: &NetworkCase) -> Self {
        AttackSpec { state_deviation: vec![0.0; case.state_dim()], target_buses: Vec::new() }
    }

    pub fn is_trivial(&self) -> bool {
        self.state_deviation.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttackStrength {
    Weak,
    Medium,
    Strong,
}

impl std::str::FromStr for AttackStrength {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "weak" => Ok(AttackStrength::Weak),
            "medium" => Ok(AttackStrength::Medium),
            "strong" => Ok(AttackStrength::Strong),
            other => Err(format!("unknown attack strength `{other}`")),
        }
    }
}

impl std::fmt::Display for AttackStrength {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttackStrength::Weak => "weak",
            AttackStrength::Medium => "medium",
            AttackStrength::Strong => "strong",
        };
        f.write_str(s)
    }
}

/// Deviation statistics over the attacked buses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrengthStats {
    /// `sum |dP_i| / sum |P_i|` over attacked buses (ratio of the two means).
    pub injection_ratio: f64,
    /// Mean `|dV_i|` relative to the 1.0 p.u. nominal voltage.
    pub voltage_ratio: f64,
    /// Mean `|d theta_i|` in degrees.
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrengthAssessment {
    pub strength: AttackStrength,
    pub stats: StrengthStats,
}

pub const WEAK_INJECTION_RATIO: f64 = 0.10;
pub const WEAK_VOLTAGE_RATIO: f64 = 0.05;
pub const WEAK_ANGLE_DEG: f64 = 2.0;
pub const STRONG_INJECTION_RATIO: f64 = 0.30;
pub const STRONG_VOLTAGE_RATIO: f64 = 0.10;
pub const STRONG_ANGLE_DEG: f64 = 5.0;

/// Strong when all three statistics exceed their strong bounds, otherwise weak
/// when any falls below its weak bound, otherwise medium.
pub fn classify_stats(stats: &StrengthStats) -> AttackStrength {
    if stats.injection_ratio > STRONG_INJECTION_RATIO
        && stats.voltage_ratio > STRONG_VOLTAGE_RATIO
        && stats.angle_deg > STRONG_ANGLE_DEG
    {
        AttackStrength::Strong
    } else if stats.injection_ratio < WEAK_INJECTION_RATIO
        || stats.voltage_ratio < WEAK_VOLTAGE_RATIO
        || stats.angle_deg < WEAK_ANGLE_DEG
    {
        AttackStrength::Weak
    } else {
        AttackStrength::Medium
    }
}

/// `alpha = h(x_est + l) - h(x_est)`.
pub fn build_attack_vector(
    spec: &AttackSpec,
    x_est: &StateVector,
    case: &NetworkCase,
    schema: &MeasurementSchema,
) -> Result<MeasurementVector, AttackError> {
    let attacked = x_est.offset(&spec.state_deviation, case)?;
    let before = measurement_function(x_est, case, schema)?;
    let after = measurement_function(&attacked, case, schema)?;
    Ok(MeasurementVector::new(
        after.values.iter().zip(&before.values).map(|(a, b)| a - b).collect(),
    ))
}

/// Computes the deviation statistics and the strength class.
///
/// Injection deviations and base injections are read from `alpha` and `z`
/// where the schema measures the bus, and recomputed from the states otherwise.
pub fn classify_strength(
    spec: &AttackSpec,
    x_est: &StateVector,
    z: &MeasurementVector,
    alpha: &MeasurementVector,
    case: &NetworkCase,
    schema: &MeasurementSchema,
) -> Result<StrengthAssessment, AttackError> {
    z.check(schema)?;
    alpha.check(schema)?;
    if spec.state_deviation.len() != case.state_dim() {
        return Err(GridError::DimensionMismatch {
            what: "state deviation",
            expected: case.state_dim(),
            found: spec.state_deviation.len(),
        }
        .into());
    }
    let buses: Vec<usize> = if spec.target_buses.is_empty() {
        (0..case.num_buses())
            .filter(|&b| {
                case.angle_column(b).is_some_and(|c| spec.state_deviation[c] != 0.0)
                    || spec.state_deviation[case.magnitude_column(b)] != 0.0
            })
            .collect()
    } else {
        spec.target_buses.clone()
    };
    if buses.is_empty() {
        let stats = StrengthStats { injection_ratio: 0.0, voltage_ratio: 0.0, angle_deg: 0.0 };
        return Ok(StrengthAssessment { strength: classify_stats(&stats), stats });
    }
    let mut attacked: Option<StateVector> = None;
    let (mut dp_sum, mut p_sum, mut dv_sum, mut da_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut angle_count = 0usize;
    for &bus in &buses {
        match schema.find(MeasurementKind::PInjection, MeasurementLocation::Bus(bus)) {
            Some(k) => {
                dp_sum += alpha.values[k].abs();
                p_sum += z.values[k].abs();
            }
            None => {
                let after = match &attacked {
                    Some(s) => s,
                    None => attacked.insert(x_est.offset(&spec.state_deviation, case)?),
                };
                let p0 = bus_injection(x_est, case, bus).0;
                dp_sum += (bus_injection(after, case, bus).0 - p0).abs();
                p_sum += p0.abs();
            }
        }
        dv_sum += spec.state_deviation[case.magnitude_column(bus)].abs();
        if let Some(c) = case.angle_column(bus) {
            da_sum += spec.state_deviation[c].abs();
            angle_count += 1;
        }
    }
    let injection_ratio = if p_sum > 1e-9 {
        dp_sum / p_sum
    } else if dp_sum > 1e-12 {
        f64::INFINITY
    } else {
        0.0
    };
    let stats = StrengthStats {
        injection_ratio,
        voltage_ratio: dv_sum / buses.len() as f64,
        angle_deg: if angle_count > 0 { (da_sum / angle_count as f64).to_degrees() } else { 0.0 },
    };
    Ok(StrengthAssessment { strength: classify_stats(&stats), stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{bdd_check, wls_estimate, BddConfig, BddOutcome};
    use crate::grid::{load_case, solve_power_flow, BranchEnd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ieee14() -> NetworkCase {
        load_case(concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/ieee14.case")).unwrap()
    }

    fn base_state(case: &NetworkCase) -> StateVector {
        let (p, q) = case.base_loads();
        solve_power_flow(case, &p, &q).unwrap()
    }

    fn stats(i: f64, v: f64, a: f64) -> StrengthStats {
        StrengthStats { injection_ratio: i, voltage_ratio: v, angle_deg: a }
    }

    #[test]
    fn zero_deviation_gives_zero_attack() {
        let case = ieee14();
        let schema = MeasurementSchema::default_for(&case, 0.01);
        let alpha = build_attack_vector(&AttackSpec::zero(&case), &base_state(&case), &case, &schema).unwrap();
        assert!(alpha.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_deviation_length_is_rejected() {
        let case = ieee14();
        let schema = MeasurementSchema::default_for(&case, 0.01);
        let spec = AttackSpec { state_deviation: vec![0.1; 5], target_buses: vec![] };
        assert!(build_attack_vector(&spec, &base_state(&case), &case, &schema).is_err());
    }

    #[test]
    fn single_angle_attack_touches_only_adjacent_measurements() {
        let case = ieee14();
        let schema = MeasurementSchema::default_for(&case, 0.01);
        let bus = case.bus_position(4).unwrap();
        let mut spec = AttackSpec::zero(&case);
        spec.state_deviation[case.angle_column(bus).unwrap()] = 0.05;
        spec.target_buses = vec![bus];
        let alpha = build_attack_vector(&spec, &base_state(&case), &case, &schema).unwrap();
        // Oracle: injections at the bus and its neighbours, flows on incident branches.
        let mut neighbours: Vec<usize> = case
            .branches
            .iter()
            .filter_map(|br| br.opposite(bus))
            .collect();
        neighbours.push(bus);
        for (k, e) in schema.entries.iter().enumerate() {
            let expected_nonzero = match e.location {
                MeasurementLocation::Bus(b) => neighbours.contains(&b),
                MeasurementLocation::Branch { branch, end } => {
                    assert_eq!(end, BranchEnd::From);
                    case.branches[branch].touches(bus)
                }
            };
            assert_eq!(alpha.values[k] != 0.0, expected_nonzero, "entry {}", e.label(&case));
        }
    }

    #[test]
    fn stealthy_attack_keeps_residual_and_passes_bdd() {
        let case = ieee14();
        let schema = MeasurementSchema::default_for(&case, 0.01);
        let cfg = BddConfig::for_schema(&case, &schema, 0.99).unwrap();
        let truth = base_state(&case);
        let z = measurement_function(&truth, &case, &schema).unwrap();
        let est = wls_estimate(&z, &case, &schema, &StateVector::flat(14)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for strength in [AttackStrength::Weak, AttackStrength::Strong] {
            for _ in 0..10 {
                let spec = sample_attack(&case, strength, &mut rng);
                let alpha = build_attack_vector(&spec, &est.estimated_state, &case, &schema).unwrap();
                let za = MeasurementVector::new(z.values.iter().zip(&alpha.values).map(|(a, b)| a + b).collect());
                let report = bdd_check(&za, &case, &schema, &cfg).unwrap();
                assert_eq!(report.outcome, BddOutcome::Normal);
                assert!((report.estimate.residual_norm - est.residual_norm).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn one_degree_angle_only_is_weak() {
        let case = ieee14();
        let schema = MeasurementSchema::default_for(&case, 0.01);
        let x = base_state(&case);
        let z = measurement_function(&x, &case, &schema).unwrap();
        let bus = case.bus_position(9).unwrap();
        let mut spec = AttackSpec::zero(&case);
        spec.state_deviation[case.angle_column(bus).unwrap()] = 1f64.to_radians();
        spec.target_buses = vec![bus];
        let alpha = build_attack_vector(&spec, &x, &case, &schema).unwrap();
        let a = classify_strength(&spec, &x, &z, &alpha, &case, &schema).unwrap();
        assert_eq!(a.strength, AttackStrength::Weak);
        assert!((a.stats.angle_deg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classification_bands() {
        assert_eq!(classify_stats(&stats(0.40, 0.12, 6.0)), AttackStrength::Strong);
        assert_eq!(classify_stats(&stats(0.20, 0.07, 3.0)), AttackStrength::Medium);
        assert_eq!(classify_stats(&stats(0.0, 0.0, 1.0)), AttackStrength::Weak);
        // Strong takes precedence only when all three exceed.
        assert_eq!(classify_stats(&stats(5.0, 0.30, 1.0)), AttackStrength::Weak);
        assert_eq!(classify_stats(&stats(0.35, 0.12, 4.0)), AttackStrength::Medium);
        // Boundaries are strict on both sides.
        assert_eq!(classify_stats(&stats(0.10, 0.05, 2.0)), AttackStrength::Medium);
        assert_eq!(classify_stats(&stats(0.30, 0.10, 5.0)), AttackStrength::Medium);
    }

    proptest::proptest! {
        #[test]
        fn classification_is_total_and_consistent(
            i in 0.0f64..1.0, v in 0.0f64..0.3, a in 0.0f64..15.0,
        ) {
            let s = stats(i, v, a);
            let strong = i > 0.3 && v > 0.1 && a > 5.0;
            let weak = i < 0.1 || v < 0.05 || a < 2.0;
            let expected = if strong { AttackStrength::Strong } else if weak { AttackStrength::Weak } else { AttackStrength::Medium };
            proptest::prop_assert_eq!(classify_stats(&s), expected);
        }
    }
}
