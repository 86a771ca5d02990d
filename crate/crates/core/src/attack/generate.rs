//! Sample generation: random loads, power flow, attack sampling and noise.
//!
//! Every sample owns an independent ChaCha8 stream seeded with
//! `derive_seed(master, stream, index)`, so samples can be produced in any
//! order (or in parallel) and still come out identical.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    build_attack_vector, classify_strength, AttackError, AttackSpec, AttackStrength, LabeledSample,
    StrengthAssessment,
};
use crate::estimation::{bdd_check, wls_estimate, BddConfig, BddOutcome, EstimationResult};
use crate::grid::{measurement_function, solve_power_flow, MeasurementSchema, MeasurementVector, NetworkCase, StateVector};

pub const STREAM_NORMAL: u64 = 1;
pub const STREAM_COMPROMISED: u64 = 2;
pub const STREAM_NOISE: u64 = 3;

const MAX_LOAD_RETRIES: usize = 10;
const STEALTH_TOLERANCE: f64 = 1e-6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed: `splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

fn sample_rng(master: u64, stream: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index as u64))
}

/// A solved operating point and its noise-free measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
    pub state: StateVector,
    pub measurements: MeasurementVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompromisedSample {
    pub base: OperatingPoint,
    pub x_est: StateVector,
    pub spec: AttackSpec,
    pub alpha: MeasurementVector,
    /// `z + alpha`.
    pub attacked: MeasurementVector,
    pub assessment: StrengthAssessment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    /// Attack candidates (draws and rescalings) tried per sample.
    pub attack_budget: usize,
    /// Re-estimate every matching candidate from a flat start and reject it
    /// unless the residual norm is unchanged. Large deviations can lead the
    /// estimator into a spurious local minimum, which the attacker avoids.
    pub screen_with_estimator: bool,
    /// When set, every emitted attack is re-estimated and checked against this
    /// detector; a flagged sample or a moved residual is an error.
    pub verify_stealth: Option<BddConfig>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions { attack_budget: 1000, screen_with_estimator: true, verify_stealth: None }
    }
}

/// Draws Gaussian loads with mean equal to the base load and variance equal to
/// one tenth of it, both in per-unit.
pub fn draw_loads<R: Rng>(case: &NetworkCase, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let draw = |mean_pu: f64, rng: &mut R| {
        let std_pu = (mean_pu.abs() / 10.0).sqrt();
        let e: f64 = rng.sample(StandardNormal);
        mean_pu + std_pu * e
    };
    let mut p = Vec::with_capacity(case.num_buses());
    let mut q = Vec::with_capacity(case.num_buses());
    for bus in &case.buses {
        p.push(draw(bus.base_load_p, rng));
        q.push(draw(bus.base_load_q, rng));
    }
    (p, q)
}

/// Redraws loads until the power flow converges and a flat-start estimate
/// reproduces the measurements. Operating points the estimator cannot track
/// would raise bad-data alarms without any attack.
fn draw_operating_point(
    case: &NetworkCase,
    schema: &MeasurementSchema,
    rng: &mut ChaCha8Rng,
    sample: usize,
) -> Result<(OperatingPoint, EstimationResult), AttackError> {
    let flat = StateVector::flat(case.num_buses());
    for attempt in 0..=MAX_LOAD_RETRIES {
        let (load_p, load_q) = draw_loads(case, rng);
        let state = match solve_power_flow(case, &load_p, &load_q) {
            Ok(state) => state,
            Err(e) => {
                log::warn!("sample {sample}: power flow failed on draw {attempt} ({e}), redrawing");
                continue;
            }
        };
        let measurements = measurement_function(&state, case, schema)?;
        let estimate = wls_estimate(&measurements, case, schema, &flat)?;
        if estimate.residual_norm >= STEALTH_TOLERANCE {
            log::warn!(
                "sample {sample}: estimator stalls at residual {:.3e} on draw {attempt}, redrawing",
                estimate.residual_norm
            );
            continue;
        }
        return Ok((OperatingPoint { load_p, load_q, state, measurements }, estimate));
    }
    Err(AttackError::PowerFlowRetries { sample, retries: MAX_LOAD_RETRIES })
}

pub fn generate_normal_samples(
    case: &NetworkCase,
    schema: &MeasurementSchema,
    count: usize,
    seed: u64,
) -> Result<Vec<OperatingPoint>, AttackError> {
    if count == 0 {
        return Err(AttackError::Invalid("sample count must be positive".into()));
    }
    schema.validate(case)?;
    (0..count)
        .map(|i| Ok(draw_operating_point(case, schema, &mut sample_rng(seed, STREAM_NORMAL, i), i)?.0))
        .collect()
}

/// Per-bus deviation magnitudes `(angle degrees, voltage p.u.)` drawn for a target.
fn prior(strength: AttackStrength) -> ((f64, f64), (f64, f64)) {
    match strength {
        AttackStrength::Weak => ((0.2, 1.8), (0.005, 0.045)),
        AttackStrength::Medium => ((2.5, 4.5), (0.06, 0.09)),
        AttackStrength::Strong => ((5.5, 12.0), (0.105, 0.16)),
    }
}

fn signed<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let v = rng.gen_range(lo..hi);
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Draws a localized deviation on one to three adjacent non-slack buses.
pub fn sample_attack<R: Rng>(case: &NetworkCase, strength: AttackStrength, rng: &mut R) -> AttackSpec {
    let candidates: Vec<usize> = (0..case.num_buses()).filter(|&b| b != case.slack_bus).collect();
    let size = rng.gen_range(1..=3usize);
    let mut targets = vec![*candidates.choose(rng).expect("case has a non-slack bus")];
    while targets.len() < size {
        let mut frontier: Vec<usize> = targets
            .iter()
            .flat_map(|&b| case.admittance().neighbors(b).iter().copied())
            .filter(|&b| b != case.slack_bus && !targets.contains(&b))
            .collect();
        frontier.sort_unstable();
        frontier.dedup();
        match frontier.choose(rng) {
            Some(&b) => targets.push(b),
            None => break,
        }
    }
    targets.sort_unstable();
    let ((a_lo, a_hi), (v_lo, v_hi)) = prior(strength);
    let mut deviation = vec![0.0; case.state_dim()];
    for &bus in &targets {
        let col = case.angle_column(bus).expect("targets exclude the slack bus");
        deviation[col] = signed(rng, a_lo, a_hi).to_radians();
        deviation[case.magnitude_column(bus)] = signed(rng, v_lo, v_hi);
    }
    AttackSpec { state_deviation: deviation, target_buses: targets }
}

fn add(a: &MeasurementVector, b: &MeasurementVector) -> MeasurementVector {
    MeasurementVector::new(a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect())
}

/// Draws a normal operating point per sample and plants a stealthy attack of
/// the requested strength, rescaling candidates toward the target band.
pub fn generate_compromised_samples(
    case: &NetworkCase,
    schema: &MeasurementSchema,
    count: usize,
    target: AttackStrength,
    seed: u64,
    options: &GenerationOptions,
) -> Result<Vec<CompromisedSample>, AttackError> {
    if count == 0 {
        return Err(AttackError::Invalid("sample count must be positive".into()));
    }
    if options.attack_budget == 0 {
        return Err(AttackError::Invalid("attack budget must be positive".into()));
    }
    schema.validate(case)?;
    let flat = StateVector::flat(case.num_buses());
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = sample_rng(seed, STREAM_COMPROMISED, i);
        let (base, estimate) = draw_operating_point(case, schema, &mut rng, i)?;
        let x_est = estimate.estimated_state;
        let mut found = None;
        let mut tries = 0;
        'search: while tries < options.attack_budget {
            let mut spec = sample_attack(case, target, &mut rng);
            for _ in 0..4 {
                if tries == options.attack_budget {
                    break 'search;
                }
                tries += 1;
                let alpha = build_attack_vector(&spec, &x_est, case, schema)?;
                let assessment = classify_strength(&spec, &x_est, &base.measurements, &alpha, case, schema)?;
                if assessment.strength == target {
                    let attacked = add(&base.measurements, &alpha);
                    if !options.screen_with_estimator || {
                        let again = wls_estimate(&attacked, case, schema, &flat)?;
                        (again.residual_norm - estimate.residual_norm).abs() < STEALTH_TOLERANCE
                    } {
                        found = Some((spec, alpha, attacked, assessment));
                        break 'search;
                    }
                    log::debug!("sample {i}: candidate leads the estimator astray, redrawing");
                    continue 'search;
                }
                let factor = if assessment.strength < target { 1.25 } else { 0.8 };
                spec.state_deviation.iter_mut().for_each(|v| *v *= factor);
            }
        }
        let (spec, alpha, attacked, assessment) =
            found.ok_or(AttackError::BudgetExceeded { sample: i, target, budget: options.attack_budget })?;
        if let Some(config) = &options.verify_stealth {
            let report = bdd_check(&attacked, case, schema, config)?;
            let moved = (report.estimate.residual_norm - estimate.residual_norm).abs();
            if report.outcome != BddOutcome::Normal || moved >= STEALTH_TOLERANCE {
                return Err(AttackError::Invalid(format!(
                    "sample {i}: attack is not stealthy (statistic {:.3e}, residual moved {moved:.3e})",
                    report.statistic
                )));
            }
        }
        out.push(CompromisedSample { base, x_est, spec, alpha, attacked, assessment });
    }
    Ok(out)
}

/// Adds zero-mean Gaussian noise with standard deviation `level * |value|` to
/// every feature. Labels are carried over unchanged.
pub fn add_measurement_noise(samples: &[LabeledSample], level: f64, seed: u64) -> Result<Vec<LabeledSample>, AttackError> {
    if !(0.0..=0.1).contains(&level) {
        return Err(AttackError::Invalid(format!("noise level {level} outside [0, 0.1]")));
    }
    if level == 0.0 {
        return Ok(samples.to_vec());
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = sample_rng(seed, STREAM_NOISE, i);
            let features = s
                .features
                .iter()
                .map(|&v| v + level * v.abs() * unit.sample(&mut rng))
                .collect();
            LabeledSample { features, label: s.label }
        })
        .collect())
}
