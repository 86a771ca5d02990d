//! Secure federated averaging over Paillier-encrypted weights.
//!
//! A trustee generates one keypair and hands it to every client. Each round,
//! clients train locally, encrypt every encoded weight and upload the
//! ciphertexts; the server multiplies them per dimension without seeing any
//! plaintext; clients decrypt the aggregate, divide by the client count and
//! load the decoded average. Messages cross the client boundary only in their
//! serialized JSON form.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{CryptoRng, RngCore};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attack::{add_measurement_noise, derive_seed, AttackError, ClientDataset, ClientSpec, FeatureLayout, LabeledSample};
use crate::detector::{
    predict_batch, train_local, DetectorError, FeatureScaler, ModelWeights, TrainConfig, TransformerConfig,
};
use crate::metrics::{compute_metrics, Metrics, MetricsError};
use crate::paillier::{
    aggregate, decrypt, encrypt, key_generation, Ciphertext, EncodingParams, PaillierError, PrivateKey, PublicKey,
};

pub const MAX_ROUNDS: usize = 9;
/// Largest allowed element-wise gap between the secure and plaintext averages.
pub const FIDELITY_TOLERANCE: f64 = 1e-7;
/// Client `t` trains phase `k` with `derive_seed(train.seed, STREAM_CLIENT_TRAIN + t, k)`.
pub const STREAM_CLIENT_TRAIN: u64 = 0x100;

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("invalid federation setup: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("malformed message: {0}")]
    Message(String),
    #[error("round {round}: client {client} decrypted an average that differs from client 0")]
    DecryptionMismatch { round: usize, client: usize },
    #[error("round {round}: secure average deviates from the plaintext average by {max_error:e}")]
    Fidelity { round: usize, max_error: f64 },
    #[error("weight layouts differ between clients")]
    LayoutMismatch,
    #[error("round log: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Communication rounds; 0 trains every client locally without exchange.
    pub rounds: usize,
    pub clients: Vec<ClientSpec>,
    pub model: TransformerConfig,
    /// `epochs` is the number of local epochs per round.
    pub train: TrainConfig,
    pub encoding: EncodingParams,
    /// Size of each Paillier prime.
    pub prime_bits: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.rounds > MAX_ROUNDS {
            return Err(FedError::InvalidConfig(format!("at most {MAX_ROUNDS} rounds, got {}", self.rounds)));
        }
        if self.clients.len() < 2 {
            return Err(FedError::InvalidConfig("federation needs at least two clients".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.encoding.validate()?;
        if self.prime_bits < 16 {
            return Err(FedError::InvalidConfig("primes must have at least 16 bits".into()));
        }
        Ok(())
    }

    /// Fails when `K` encoded weights could overflow the plaintext space of `pk`.
    pub fn check_capacity(&self, pk: &PublicKey) -> Result<(), FedError> {
        Ok(self.encoding.check_capacity(self.clients.len(), pk)?)
    }
}

/// Key authority. Used only during setup.
pub struct Trustee {
    public: PublicKey,
    private: PrivateKey,
}

impl Trustee {
    pub fn generate<R: RngCore + CryptoRng>(prime_bits: u64, rng: &mut R) -> Result<Self, FedError> {
        let (public, private) = key_generation(prime_bits, rng)?;
        Ok(Trustee { public, private })
    }

    pub fn from_keys(public: PublicKey, private: PrivateKey) -> Result<Self, FedError> {
        if public.key_id() != private.key_id() {
            return Err(FedError::InvalidConfig("public and private key ids differ".into()));
        }
        Ok(Trustee { public, private })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    /// The keypair handed to each enrolled client.
    pub fn distribute(&self) -> (PublicKey, PrivateKey) {
        (self.public.clone(), self.private.clone())
    }
}

/// Upload of one client's encrypted weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientUpload {
    pub client_id: usize,
    pub round: usize,
    pub key_id: String,
    pub layout_hash: String,
    /// Lowercase hex, one per weight in layout order.
    pub ciphertexts: Vec<String>,
}

/// Per-dimension ciphertext products returned to every client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateBroadcast {
    pub round: usize,
    pub key_id: String,
    pub layout_hash: String,
    /// Number of uploads folded into each ciphertext.
    pub clients: usize,
    pub ciphertexts: Vec<String>,
}

/// Passes a message through its JSON wire form.
pub fn transmit<T: Serialize + DeserializeOwned>(message: &T) -> Result<T, FedError> {
    let wire = serde_json::to_vec(message).map_err(|e| FedError::Message(e.to_string()))?;
    serde_json::from_slice(&wire).map_err(|e| FedError::Message(e.to_string()))
}

/// Server step: multiplies the uploaded ciphertexts dimension by dimension.
pub fn aggregate_uploads(uploads: &[ClientUpload], pk: &PublicKey) -> Result<AggregateBroadcast, FedError> {
    let first = uploads.first().ok_or_else(|| FedError::Message("no uploads to aggregate".into()))?;
    let mut ids: Vec<usize> = uploads.iter().map(|u| u.client_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != uploads.len() {
        return Err(FedError::Message("duplicate client upload".into()));
    }
    for u in uploads {
        if u.round != first.round {
            return Err(FedError::Message(format!("client {} uploaded for round {}, expected {}", u.client_id, u.round, first.round)));
        }
        if u.key_id != pk.key_id() {
            return Err(FedError::Message(format!("client {} used key {}", u.client_id, u.key_id)));
        }
        if u.layout_hash != first.layout_hash || u.ciphertexts.len() != first.ciphertexts.len() {
            return Err(FedError::LayoutMismatch);
        }
    }
    let mut out = Vec::with_capacity(first.ciphertexts.len());
    let mut column = Vec::with_capacity(uploads.len());
    for d in 0..first.ciphertexts.len() {
        column.clear();
        for u in uploads {
            column.push(Ciphertext::from_hex(&u.ciphertexts[d], &u.key_id)?);
        }
        out.push(aggregate(&column, pk)?.to_hex());
    }
    Ok(AggregateBroadcast {
        round: first.round,
        key_id: pk.key_id().to_string(),
        layout_hash: first.layout_hash.clone(),
        clients: uploads.len(),
        ciphertexts: out,
    })
}

/// Element-wise mean of identically laid out weights.
pub fn plain_fedavg(weights: &[ModelWeights]) -> Result<ModelWeights, FedError> {
    let first = weights.first().ok_or_else(|| FedError::InvalidConfig("nothing to average".into()))?;
    if weights.iter().any(|w| !w.same_layout(first)) {
        return Err(FedError::LayoutMismatch);
    }
    // Averaging offsets from the first input keeps identical inputs exact.
    let k = weights.len() as f64;
    let mut out = first.clone();
    for (d, v) in out.values_mut().iter_mut().enumerate() {
        let base = first.values()[d];
        *v = base + weights.iter().map(|w| w.values()[d] - base).sum::<f64>() / k;
    }
    Ok(out)
}

/// One participant. Samples are held privately and never leave the node: the
/// only outbound data are [`ClientUpload`] messages and aggregate metrics.
pub struct ClientNode {
    id: usize,
    spec: ClientSpec,
    layout: FeatureLayout,
    scaler: FeatureScaler,
    /// Scaled training samples.
    train: Vec<LabeledSample>,
    /// Raw test samples, scaled at evaluation time.
    test: Vec<LabeledSample>,
    weights: ModelWeights,
    public: PublicKey,
    private: PrivateKey,
}

impl std::fmt::Debug for ClientNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientNode")
            .field("id", &self.id)
            .field("spec", &self.spec)
            .field("train_samples", &self.train.len())
            .field("test_samples", &self.test.len())
            .field("key_id", &self.public.key_id())
            .finish_non_exhaustive()
    }
}

impl ClientNode {
    /// Fits the feature scaler on the local training split.
    pub fn new(dataset: ClientDataset, initial: ModelWeights, keys: (PublicKey, PrivateKey)) -> Result<Self, FedError> {
        let (public, private) = keys;
        if public.key_id() != private.key_id() {
            return Err(FedError::InvalidConfig("public and private key ids differ".into()));
        }
        let scaler = FeatureScaler::fit(&dataset.train)?;
        Ok(ClientNode {
            id: dataset.client_id,
            spec: dataset.client,
            train: scaler.transform_samples(&dataset.train),
            test: dataset.test,
            layout: dataset.layout,
            scaler,
            weights: initial,
            public,
            private,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn spec(&self) -> &ClientSpec {
        &self.spec
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn scaler(&self) -> &FeatureScaler {
        &self.scaler
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }

    pub fn load_weights(&mut self, weights: ModelWeights) -> Result<(), FedError> {
        if !weights.same_layout(&self.weights) {
            return Err(FedError::LayoutMismatch);
        }
        self.weights = weights;
        Ok(())
    }

    /// One training phase; returns the per-epoch mean losses.
    pub fn train(&mut self, model: &TransformerConfig, train: &TrainConfig, phase: usize) -> Result<Vec<f64>, FedError> {
        let cfg = TrainConfig { seed: client_train_seed(train.seed, self.id, phase), ..*train };
        let out = train_local(&self.train, &self.weights, model, &cfg)?;
        self.weights = out.weights;
        Ok(out.loss_history)
    }

    /// Clips, encodes and encrypts every weight with fresh randomness.
    /// Returns the message and the number of clipped weights.
    pub fn upload<R: RngCore + CryptoRng>(
        &self,
        round: usize,
        encoding: &EncodingParams,
        rng: &mut R,
    ) -> Result<(ClientUpload, usize), FedError> {
        let mut clipped = 0;
        let mut ciphertexts = Vec::with_capacity(self.weights.len());
        for &w in self.weights.values() {
            let c = encoding.clip_weight(w);
            if c != w {
                clipped += 1;
            }
            ciphertexts.push(encrypt(&encoding.encode(c)?, &self.public, rng)?.to_hex());
        }
        let upload = ClientUpload {
            client_id: self.id,
            round,
            key_id: self.public.key_id().to_string(),
            layout_hash: self.weights.layout_hash(),
            ciphertexts,
        };
        Ok((upload, clipped))
    }

    /// Decrypts the aggregate and returns the decoded average weights.
    pub fn receive(&self, message: &AggregateBroadcast, encoding: &EncodingParams) -> Result<ModelWeights, FedError> {
        if message.key_id != self.public.key_id() {
            return Err(FedError::Message(format!("aggregate under foreign key {}", message.key_id)));
        }
        if message.layout_hash != self.weights.layout_hash() || message.ciphertexts.len() != self.weights.len() {
            return Err(FedError::LayoutMismatch);
        }
        let mut values = Vec::with_capacity(message.ciphertexts.len());
        for hex in &message.ciphertexts {
            let c = Ciphertext::from_hex(hex, &message.key_id)?;
            let m = decrypt(&c, &self.private, &self.public)?;
            values.push(encoding.decode_average(&m, message.clients)?);
        }
        let mut w = self.weights.clone();
        w.set_values(values)?;
        Ok(w)
    }

    /// Test-split metrics of the current weights.
    pub fn evaluate(&self, model: &TransformerConfig) -> Result<Metrics, FedError> {
        self.evaluate_samples(&self.test, model)
    }

    /// Test-split metrics after multiplicative Gaussian noise on the raw features.
    pub fn evaluate_with_noise(&self, model: &TransformerConfig, level: f64, seed: u64) -> Result<Metrics, FedError> {
        let noisy = add_measurement_noise(&self.test, level, seed)?;
        self.evaluate_samples(&noisy, model)
    }

    fn evaluate_samples(&self, raw: &[LabeledSample], model: &TransformerConfig) -> Result<Metrics, FedError> {
        let scaled = self.scaler.transform_samples(raw);
        let preds: Vec<u8> = predict_batch(&scaled, &self.weights, model)?.iter().map(|p| p.label).collect();
        let labels: Vec<u8> = raw.iter().map(|s| s.label).collect();
        Ok(compute_metrics(&preds, &labels)?)
    }
}

pub fn client_train_seed(master: u64, client: usize, phase: usize) -> u64 {
    derive_seed(master, STREAM_CLIENT_TRAIN + client as u64, phase as u64)
}

/// Wall-clock seconds per protocol stage. Kept out of reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub train_s: f64,
    pub encrypt_s: f64,
    pub aggregate_s: f64,
    pub decrypt_s: f64,
}

/// One record per (round, client). Round 0 is local-only training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub client_id: usize,
    pub client: ClientSpec,
    /// Mean loss of the last local epoch.
    pub train_loss: Option<f64>,
    /// Local model after training, before aggregation.
    pub pre_aggregation: Metrics,
    /// Model after loading the decrypted average; absent in round 0.
    pub post_aggregation: Option<Metrics>,
    pub clipped_weights: usize,
    /// Largest gap between the secure and plaintext averages.
    pub fidelity_max_error: Option<f64>,
    pub timing: RoundTiming,
}

pub fn write_round_logs(path: impl AsRef<Path>, logs: &[RoundLog]) -> Result<(), FedError> {
    let io = |e: std::io::Error| FedError::Io(e.to_string());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for log in logs {
        serde_json::to_writer(&mut f, log).map_err(|e| FedError::Io(e.to_string()))?;
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_round_logs(path: impl AsRef<Path>) -> Result<Vec<RoundLog>, FedError> {
    let text = std::fs::read_to_string(path).map_err(|e| FedError::Io(e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| FedError::Io(e.to_string())))
        .collect()
}

/// Builds the client nodes from a trustee and a shared initial model.
pub fn enroll_clients(
    datasets: Vec<ClientDataset>,
    initial: &ModelWeights,
    trustee: &Trustee,
) -> Result<Vec<ClientNode>, FedError> {
    datasets.into_iter().map(|d| ClientNode::new(d, initial.clone(), trustee.distribute())).collect()
}

fn check_clients(clients: &[ClientNode], model: &TransformerConfig) -> Result<(), FedError> {
    let first = clients.first().ok_or_else(|| FedError::InvalidConfig("no clients".into()))?;
    for c in clients {
        if c.layout.len() != model.input_features {
            return Err(FedError::InvalidConfig(format!(
                "client {} has {} features, model expects {}",
                c.id,
                c.layout.len(),
                model.input_features
            )));
        }
        c.weights.check_layout(model)?;
        if c.public.key_id() != first.public.key_id() {
            return Err(FedError::InvalidConfig("clients hold different keys".into()));
        }
    }
    Ok(())
}

/// Every client trains once on its own data; nothing is exchanged.
pub fn run_local_baseline(
    clients: &mut [ClientNode],
    model: &TransformerConfig,
    train: &TrainConfig,
) -> Result<Vec<RoundLog>, FedError> {
    check_clients(clients, model)?;
    let mut logs = Vec::with_capacity(clients.len());
    for c in clients.iter_mut() {
        let t = Instant::now();
        let losses = c.train(model, train, 0)?;
        let train_s = t.elapsed().as_secs_f64();
        logs.push(RoundLog {
            round: 0,
            client_id: c.id,
            client: c.spec,
            train_loss: losses.last().copied(),
            pre_aggregation: c.evaluate(model)?,
            post_aggregation: None,
            clipped_weights: 0,
            fidelity_max_error: None,
            timing: RoundTiming { train_s, ..Default::default() },
        });
    }
    Ok(logs)
}

/// Runs the protocol for `config.rounds` rounds. Round `r` trains phase
/// `r - 1` and ends with every client holding the decoded average, so the
/// returned client weights are the post-aggregation models of the last round.
pub fn run_secfed<R: RngCore + CryptoRng>(
    config: &FederationConfig,
    clients: &mut [ClientNode],
    rng: &mut R,
) -> Result<Vec<RoundLog>, FedError> {
    config.validate()?;
    if clients.len() != config.clients.len() {
        return Err(FedError::InvalidConfig(format!(
            "config lists {} clients, {} enrolled",
            config.clients.len(),
            clients.len()
        )));
    }
    check_clients(clients, &config.model)?;
    config.check_capacity(&clients[0].public)?;
    if clients.iter().any(|c| c.weights != clients[0].weights) {
        return Err(FedError::InvalidConfig("clients must start from the same initial weights".into()));
    }
    if config.rounds == 0 {
        return run_local_baseline(clients, &config.model, &config.train);
    }
    let pk = clients[0].public.clone();
    let k = clients.len();
    let mut logs = Vec::with_capacity(config.rounds * k);
    for round in 1..=config.rounds {
        let mut uploads = Vec::with_capacity(k);
        let mut round_logs = Vec::with_capacity(k);
        let mut clipped_locals = Vec::with_capacity(k);
        for c in clients.iter_mut() {
            let t = Instant::now();
            let losses = c.train(&config.model, &config.train, round - 1)?;
            let train_s = t.elapsed().as_secs_f64();
            let pre = c.evaluate(&config.model)?;
            let t = Instant::now();
            let (upload, clipped) = c.upload(round, &config.encoding, rng)?;
            let encrypt_s = t.elapsed().as_secs_f64();
            uploads.push(transmit(&upload)?);
            let mut local = c.weights.clone();
            local.values_mut().iter_mut().for_each(|v| *v = config.encoding.clip_weight(*v));
            clipped_locals.push(local);
            round_logs.push(RoundLog {
                round,
                client_id: c.id,
                client: c.spec,
                train_loss: losses.last().copied(),
                pre_aggregation: pre,
                post_aggregation: None,
                clipped_weights: clipped,
                fidelity_max_error: None,
                timing: RoundTiming { train_s, encrypt_s, ..Default::default() },
            });
        }
        let t = Instant::now();
        let broadcast = transmit(&aggregate_uploads(&uploads, &pk)?)?;
        let aggregate_s = t.elapsed().as_secs_f64();
        let oracle = plain_fedavg(&clipped_locals)?;

        let mut reference: Option<ModelWeights> = None;
        for (c, log) in clients.iter_mut().zip(round_logs.iter_mut()) {
            let t = Instant::now();
            let averaged = c.receive(&broadcast, &config.encoding)?;
            log.timing.decrypt_s = t.elapsed().as_secs_f64();
            log.timing.aggregate_s = aggregate_s;
            match &reference {
                None => reference = Some(averaged.clone()),
                Some(r) if r.values() != averaged.values() => {
                    return Err(FedError::DecryptionMismatch { round, client: c.id });
                }
                Some(_) => {}
            }
            let max_error = averaged
                .values()
                .iter()
                .zip(oracle.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if !(max_error <= FIDELITY_TOLERANCE) {
                return Err(FedError::Fidelity { round, max_error });
            }
            c.load_weights(averaged)?;
            log.fidelity_max_error = Some(max_error);
            log.post_aggregation = Some(c.evaluate(&config.model)?);
        }
        log::info!("round {round}/{}: aggregated {} weights over {k} clients", config.rounds, oracle.len());
        logs.extend(round_logs);
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdealOutcome {
    pub weights: ModelWeights,
    pub scaler: FeatureScaler,
    pub loss_history: Vec<f64>,
    pub pooled_train: usize,
    /// Metrics on each client's own test split, in input order.
    pub per_client: Vec<Metrics>,
}

/// Centralized reference: one model on the concatenated training splits,
/// trained with the seed client 0 would use for its first phase.
pub fn run_ideal_baseline(
    datasets: &[ClientDataset],
    initial: &ModelWeights,
    model: &TransformerConfig,
    train: &TrainConfig,
) -> Result<IdealOutcome, FedError> {
    let first = datasets.first().ok_or_else(|| FedError::InvalidConfig("no client datasets".into()))?;
    if datasets.iter().any(|d| d.layout.len() != first.layout.len()) {
        return Err(FedError::LayoutMismatch);
    }
    let pooled: Vec<LabeledSample> = datasets.iter().flat_map(|d| d.train.iter().cloned()).collect();
    let scaler = FeatureScaler::fit(&pooled)?;
    let scaled = scaler.transform_samples(&pooled);
    let cfg = TrainConfig { seed: client_train_seed(train.seed, first.client_id, 0), ..*train };
    let out = train_local(&scaled, initial, model, &cfg)?;
    let per_client = datasets
        .iter()
        .map(|d| {
            let preds: Vec<u8> = predict_batch(&scaler.transform_samples(&d.test), &out.weights, model)?
                .iter()
                .map(|p| p.label)
                .collect();
            let labels: Vec<u8> = d.test.iter().map(|s| s.label).collect();
            Ok(compute_metrics(&preds, &labels)?)
        })
        .collect::<Result<Vec<_>, FedError>>()?;
    Ok(IdealOutcome { weights: out.weights, scaler, loss_history: out.loss_history, pooled_train: pooled.len(), per_client })
}
