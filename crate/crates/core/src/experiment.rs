//! End-to-end experiment runner: configuration profiles, per-client data
//! generation, federated training, baselines, noise sweeps and reports.
//!
//! Every random draw descends from `ExperimentConfig::seed` through
//! [`derive_seed`], and reports contain no timings, so a report is a pure
//! function of its configuration.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    dataset_digest, derive_seed, extract_client_dataset, generate_compromised_samples, generate_normal_samples,
    AttackError, AttackStrength, ClientDataset, ClientSpec, DatasetSizes, GenerationOptions, LabeledSample,
};
use crate::detector::{
    predict_batch, predict_feedforward, train_feedforward, FeatureScaler, FeedForwardConfig, ModelWeights,
    TrainConfig, TransformerConfig,
};
use crate::fedlearn::{
    enroll_clients, run_ideal_baseline, run_secfed, ClientNode, FedError, FederationConfig, RoundLog, Trustee,
};
use crate::grid::{load_case, MeasurementSchema, NetworkCase};
use crate::metrics::{compute_metrics, Metrics};
use crate::paillier::EncodingParams;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const NOISE_LEVELS: [f64; 4] = [0.01, 0.02, 0.03, 0.04];

/// Seed streams below the attack generator's own (1 to 3).
pub const STREAM_CLIENT_DATA: u64 = 4;
pub const STREAM_INIT: u64 = 5;
pub const STREAM_KEYS: u64 = 6;
pub const STREAM_ENCRYPT: u64 = 7;
pub const STREAM_NOISE_EVAL: u64 = 8;
pub const STREAM_TRAIN: u64 = 9;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Federation(#[from] FedError),
}

impl From<AttackError> for ExperimentError {
    fn from(e: AttackError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<crate::grid::GridError> for ExperimentError {
    fn from(e: crate::grid::GridError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<crate::detector::DetectorError> for ExperimentError {
    fn from(e: crate::detector::DetectorError) -> Self {
        ExperimentError::Federation(FedError::Detector(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Case file, relative to the workspace unless absolute.
    pub case: String,
    /// Standard deviation assumed for every meter by the estimator.
    pub measurement_sigma: f64,
    pub strength: AttackStrength,
    pub sizes: DatasetSizes,
    pub clients: Vec<ClientSpec>,
    pub rounds: usize,
    pub model: TransformerConfig,
    /// `epochs` counts local epochs per round. The effective training seed
    /// comes from [`ExperimentConfig::train_config`].
    pub train: TrainConfig,
    pub encoding: EncodingParams,
    pub prime_bits: u64,
    pub noise_levels: Vec<f64>,
    pub seed: u64,
    /// Also train the pooled-data model and the feed-forward baseline.
    pub baselines: bool,
    pub feedforward: FeedForwardConfig,
    /// Output directory, relative to the workspace.
    pub output_dir: String,
}

impl ExperimentConfig {
    /// 4 clients on IEEE 14-bus, 2000+2000 training and 500+500 test samples
    /// per client, 6 rounds of 50 local epochs, `d_model` 32.
    pub fn desk(strength: AttackStrength) -> Self {
        let clients = vec![
            ClientSpec { bus: 2, branch: (2, 3) },
            ClientSpec { bus: 3, branch: (3, 4) },
            ClientSpec { bus: 4, branch: (4, 5) },
            ClientSpec { bus: 5, branch: (5, 6) },
        ];
        let features = 2 * 14 + 2;
        ExperimentConfig {
            case: "cases/ieee14.case".into(),
            measurement_sigma: 0.01,
            strength,
            sizes: DatasetSizes { train_per_class: 2000, test_per_class: 500 },
            clients,
            rounds: 6,
            model: TransformerConfig::with_features(features),
            train: TrainConfig { epochs: 50, ..TrainConfig::default() },
            encoding: EncodingParams::default(),
            prime_bits: 256,
            noise_levels: NOISE_LEVELS.to_vec(),
            seed: 1,
            baselines: true,
            feedforward: FeedForwardConfig::with_features(features),
            output_dir: "out".into(),
        }
    }

    /// Full-scale sizes: 10000+10000 training and 1000+1000 test samples,
    /// 400 local epochs under strong and 1000 under weak attacks.
    pub fn full(strength: AttackStrength) -> Self {
        let epochs = if strength == AttackStrength::Weak { 1000 } else { 400 };
        ExperimentConfig {
            sizes: DatasetSizes::full(),
            train: TrainConfig { epochs, ..TrainConfig::default() },
            prime_bits: 512,
            ..Self::desk(strength)
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.sizes.train_per_class == 0 || self.sizes.test_per_class == 0 {
            return bad("dataset sizes must be at least 1".into());
        }
        if !(self.measurement_sigma > 0.0) {
            return bad("measurement_sigma must be positive".into());
        }
        if let Some(l) = self.noise_levels.iter().find(|l| !(0.0..=0.1).contains(*l)) {
            return bad(format!("noise level {l} outside [0, 0.1]"));
        }
        if self.strength == AttackStrength::Medium {
            return bad("strength must be weak or strong".into());
        }
        self.federation().validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.feedforward.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.feedforward.input_features != self.model.input_features {
            return bad("feed-forward and Transformer feature counts differ".into());
        }
        Ok(())
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            rounds: self.rounds,
            clients: self.clients.clone(),
            model: self.model,
            train: self.train_config(),
            encoding: self.encoding,
            prime_bits: self.prime_bits,
        }
    }

    /// Training settings with the shuffle and dropout seed derived from
    /// `seed`; `train.seed` selects a sub-stream.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, STREAM_TRAIN, self.train.seed), ..self.train }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load_case(&self, workspace: &Path) -> Result<NetworkCase, ExperimentError> {
        let path = workspace.join(&self.case);
        load_case(&path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    pub fn schema(&self, case: &NetworkCase) -> MeasurementSchema {
        MeasurementSchema::default_for(case, self.measurement_sigma)
    }
}

/// Generates each client's samples from its own seed stream.
pub fn generate_client_datasets(config: &ExperimentConfig, case: &NetworkCase) -> Result<Vec<ClientDataset>, ExperimentError> {
    config.validate()?;
    let schema = config.schema(case);
    let count = config.sizes.total_per_class();
    config
        .clients
        .iter()
        .enumerate()
        .map(|(t, spec)| {
            let seed = derive_seed(config.seed, STREAM_CLIENT_DATA, t as u64);
            let normal: Vec<_> = generate_normal_samples(case, &schema, count, seed)?
                .into_iter()
                .map(|p| p.measurements)
                .collect();
            let attacked: Vec<_> =
                generate_compromised_samples(case, &schema, count, config.strength, seed, &GenerationOptions::default())?
                    .into_iter()
                    .map(|c| c.attacked)
                    .collect();
            let ds = extract_client_dataset(t, spec, &normal, &attacked, case, &schema, config.sizes)?;
            if ds.layout.len() != config.model.input_features {
                return Err(ExperimentError::Config(format!(
                    "clients have {} features but the model expects {}",
                    ds.layout.len(),
                    config.model.input_features
                )));
            }
            log::info!("client {t} ({spec}): {} train / {} test samples", ds.train.len(), ds.test.len());
            Ok(ds)
        })
        .collect()
}

/// Train and test digests of every client, in client order.
pub fn dataset_digests(datasets: &[ClientDataset]) -> Result<Vec<String>, ExperimentError> {
    let mut out = Vec::with_capacity(2 * datasets.len());
    for d in datasets {
        out.push(dataset_digest(&d.layout, &d.train)?);
        out.push(dataset_digest(&d.layout, &d.test)?);
    }
    Ok(out)
}

pub fn initial_weights(config: &ExperimentConfig) -> Result<ModelWeights, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_INIT, 0));
    Ok(ModelWeights::init(&config.model, &mut rng)?)
}

pub fn trustee_for(config: &ExperimentConfig) -> Result<Trustee, ExperimentError> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, STREAM_KEYS, 0));
    Ok(Trustee::generate(config.prime_bits, &mut rng)?)
}

/// Accuracy and friends of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `transformer`, `ideal` or `feedforward`.
    pub model: String,
    /// `local`, `pre_aggregation`, `post_aggregation` or `final`.
    pub stage: String,
    pub round: usize,
    pub client_id: usize,
    pub bus: usize,
    pub noise_level: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub strength: AttackStrength,
    pub dataset_digests: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn new(config: &ExperimentConfig, dataset_digests: Vec<String>) -> Self {
        MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash: config.hash(),
            strength: config.strength,
            dataset_digests,
            rows: Vec::new(),
        }
    }

    /// Rows from round logs: round 0 as `local`, later rounds as pre- and
    /// post-aggregation pairs.
    pub fn push_round_logs(&mut self, logs: &[RoundLog]) {
        for log in logs {
            let row = |stage: &str, metrics: Metrics| ReportRow {
                model: "transformer".into(),
                stage: stage.into(),
                round: log.round,
                client_id: log.client_id,
                bus: log.client.bus,
                noise_level: 0.0,
                metrics,
            };
            match log.post_aggregation {
                None => self.rows.push(row("local", log.pre_aggregation)),
                Some(post) => {
                    self.rows.push(row("pre_aggregation", log.pre_aggregation));
                    self.rows.push(row("post_aggregation", post));
                }
            }
        }
    }

    /// Rows with one stage and model; the report keeps every other row too.
    pub fn select<'a>(&'a self, model: &'a str, stage: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.model == model && r.stage == stage)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plot-ready long format: one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,stage,round,client_id,bus,noise_level,accuracy,precision,recall,f1,tp,fp,tn,fn\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{:?},{},{},{},{},{},{},{},{}\n",
                r.model,
                r.stage,
                r.round,
                r.client_id,
                r.bus,
                r.noise_level,
                opt(m.accuracy),
                opt(m.precision),
                opt(m.recall),
                opt(m.f1),
                m.counts.tp,
                m.counts.fp,
                m.counts.tn,
                m.counts.fn_
            ));
        }
        out
    }

    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        let io = |e: std::io::Error| ExperimentError::Data(e.to_string());
        std::fs::write(json_path, self.to_json()).map_err(io)?;
        std::fs::write(csv_path, self.to_csv()).map_err(io)
    }
}

/// Test metrics of `weights` under each noise level, one row per (level, client).
pub fn noise_sweep(
    clients: &[ClientNode],
    model: &TransformerConfig,
    levels: &[f64],
    seed: u64,
    round: usize,
) -> Result<Vec<ReportRow>, ExperimentError> {
    let mut rows = Vec::with_capacity(levels.len() * clients.len());
    for (li, &level) in levels.iter().enumerate() {
        for c in clients {
            let s = derive_seed(seed, STREAM_NOISE_EVAL, (li * 1024 + c.id()) as u64);
            rows.push(ReportRow {
                model: "transformer".into(),
                stage: "final".into(),
                round,
                client_id: c.id(),
                bus: c.spec().bus,
                noise_level: level,
                metrics: c.evaluate_with_noise(model, level, s)?,
            });
        }
    }
    Ok(rows)
}

pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub logs: Vec<RoundLog>,
    /// Clients after the last round, holding their final weights and scalers.
    pub clients: Vec<ClientNode>,
}

/// Generates nothing: runs training, baselines and the noise sweep on the
/// given client datasets.
pub fn run_experiment(config: &ExperimentConfig, datasets: Vec<ClientDataset>) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    if datasets.len() != config.clients.len() {
        return Err(ExperimentError::Data(format!(
            "{} client datasets for {} configured clients",
            datasets.len(),
            config.clients.len()
        )));
    }
    let mut report = MetricsReport::new(config, dataset_digests(&datasets)?);
    let initial = initial_weights(config)?;
    let trustee = trustee_for(config)?;
    let baseline_data = config.baselines.then(|| datasets.clone());
    let mut clients = enroll_clients(datasets, &initial, &trustee)?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, STREAM_ENCRYPT, 0));
    let logs = run_secfed(&config.federation(), &mut clients, &mut rng)?;
    report.push_round_logs(&logs);
    report.rows.extend(noise_sweep(&clients, &config.model, &config.noise_levels, config.seed, config.rounds)?);
    if let Some(data) = baseline_data {
        report.rows.extend(run_baselines(config, &data, &initial)?);
    }
    Ok(ExperimentOutcome { report, logs, clients })
}

/// Epoch budget of the baselines: as many epochs as one client trains in total.
pub fn baseline_epochs(config: &ExperimentConfig) -> usize {
    config.train.epochs * config.rounds.max(1)
}

/// Pooled-data Transformer and per-client feed-forward networks, both with
/// the federated epoch budget.
pub fn run_baselines(
    config: &ExperimentConfig,
    datasets: &[ClientDataset],
    initial: &ModelWeights,
) -> Result<Vec<ReportRow>, ExperimentError> {
    let train = TrainConfig { epochs: baseline_epochs(config), ..config.train_config() };
    let ideal = run_ideal_baseline(datasets, initial, &config.model, &train)?;
    let mut rows = Vec::with_capacity(2 * datasets.len());
    for (d, m) in datasets.iter().zip(ideal.per_client) {
        rows.push(ReportRow {
            model: "ideal".into(),
            stage: "final".into(),
            round: 0,
            client_id: d.client_id,
            bus: d.client.bus,
            noise_level: 0.0,
            metrics: m,
        });
    }
    for d in datasets {
        let scaler = FeatureScaler::fit(&d.train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_INIT, 1));
        let w0 = config.feedforward.init(&mut rng)?;
        let t = TrainConfig { seed: crate::fedlearn::client_train_seed(train.seed, d.client_id, 0), ..train };
        let out = train_feedforward(&scaler.transform_samples(&d.train), &w0, &config.feedforward, &t)?;
        let preds = predict_feedforward(&scaler.transform_samples(&d.test), &out.weights, &config.feedforward)?;
        rows.push(ReportRow {
            model: "feedforward".into(),
            stage: "final".into(),
            round: 0,
            client_id: d.client_id,
            bus: d.client.bus,
            noise_level: 0.0,
            metrics: metrics_of(&preds.iter().map(|p| p.label).collect::<Vec<_>>(), &d.test)?,
        });
    }
    Ok(rows)
}

fn metrics_of(predictions: &[u8], samples: &[LabeledSample]) -> Result<Metrics, ExperimentError> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    compute_metrics(predictions, &labels).map_err(|e| ExperimentError::Data(e.to_string()))
}

/// Metrics of a Transformer on raw samples, scaled with `scaler`.
pub fn evaluate_model(
    samples: &[LabeledSample],
    weights: &ModelWeights,
    model: &TransformerConfig,
    scaler: &FeatureScaler,
) -> Result<Metrics, ExperimentError> {
    let preds = predict_batch(&scaler.transform_samples(samples), weights, model)?;
    metrics_of(&preds.iter().map(|p| p.label).collect::<Vec<_>>(), samples)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
