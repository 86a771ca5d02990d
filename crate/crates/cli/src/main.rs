//! Command-line runner: key generation, client data generation, local and
//! federated training, evaluation, noise sweeps and report rendering.
//!
//! Every path is relative to the workspace directory (`--workspace` or
//! `FEDGRID_WORKSPACE`). Outputs land under the configured output directory:
//!
//! ```text
//! keys/{public,private}.json
//! data/client{t}_{train,test}.csv   data/client{t}_{train,test}.meta.json
//! checkpoints/{local,federated}_client{t}.json
//! logs/{local,federated}.jsonl
//! reports/*.json, reports/*.csv
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use fedgrid::attack::{
    add_measurement_noise, dataset_digest, derive_seed, read_dataset_csv, write_dataset_csv, AttackError,
    AttackStrength, ClientDataset, DatasetSidecar,
};
use fedgrid::detector::{Checkpoint, DetectorError, FeatureScaler, ModelWeights};
use fedgrid::experiment::{
    evaluate_model, generate_client_datasets, initial_weights, run_baselines, trustee_for, ExperimentConfig,
    ExperimentError, MetricsReport, ReportRow, STREAM_ENCRYPT, STREAM_NOISE_EVAL,
};
use fedgrid::fedlearn::{
    enroll_clients, read_round_logs, run_local_baseline, run_secfed, write_round_logs, FedError, RoundLog, Trustee,
};
use fedgrid::paillier::{PaillierError, PrivateKey, PublicKey};

#[derive(Parser, Debug)]
#[command(name = "fedgrid", version, about = "Federated FDIA detection testbed")]
struct Cli {
    /// Directory all relative paths resolve against.
    #[arg(long, env = "FEDGRID_WORKSPACE", default_value = ".", global = true)]
    workspace: PathBuf,
    /// Experiment configuration (JSON). Without it the built-in profile is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Attack strength of the built-in profile.
    #[arg(long, value_enum, default_value = "strong", global = true)]
    strength: Strength,
    /// Use the full-scale sizes instead of the desk profile.
    #[arg(long, global = true)]
    full: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the federation's Paillier keypair.
    Keygen,
    /// Generate per-client train and test CSVs with provenance sidecars.
    GenerateData,
    /// Train each client on its own data only (R = 0).
    TrainLocal,
    /// Run the secure federated protocol for the configured rounds.
    TrainFederated,
    /// Evaluate a model set on every client's test split.
    Evaluate {
        #[arg(long, value_enum, default_value = "federated")]
        model: ModelSet,
        /// Also train and evaluate the pooled-data and feed-forward baselines.
        #[arg(long)]
        baselines: bool,
    },
    /// Evaluate a model set under each configured measurement noise level.
    NoiseSweep {
        #[arg(long, value_enum, default_value = "federated")]
        model: ModelSet,
    },
    /// Merge round logs and evaluation reports into one report plus curves.
    Report,
    /// Write the effective configuration as JSON.
    WriteConfig {
        /// Destination, relative to the workspace.
        path: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Strength {
    Weak,
    Strong,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModelSet {
    /// Randomly initialized weights.
    Initial,
    Local,
    Federated,
}

impl ModelSet {
    fn name(self) -> &'static str {
        match self {
            ModelSet::Initial => "initial",
            ModelSet::Local => "local",
            ModelSet::Federated => "federated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

#[derive(Debug)]
struct Failure {
    stage: &'static str,
    kind: Kind,
    message: String,
}

type Outcome<T> = Result<T, Failure>;

fn fail(stage: &'static str, kind: Kind, message: impl Into<String>) -> Failure {
    Failure { stage, kind, message: message.into() }
}

fn detector_kind(e: &DetectorError) -> Kind {
    match e {
        DetectorError::InvalidConfig(_) => Kind::Config,
        DetectorError::Checkpoint(_)
        | DetectorError::EmptyDataset
        | DetectorError::DimensionMismatch { .. }
        | DetectorError::LayoutMismatch(_) => Kind::Data,
        DetectorError::NonFinite { .. } | DetectorError::NonFiniteLoss { .. } => Kind::Numeric,
    }
}

fn attack_kind(e: &AttackError) -> Kind {
    match e {
        AttackError::Io(_) | AttackError::BranchNotIncident { .. } | AttackError::Invalid(_) => Kind::Data,
        _ => Kind::Numeric,
    }
}

fn fed_kind(e: &FedError) -> Kind {
    match e {
        FedError::InvalidConfig(_) => Kind::Config,
        FedError::Paillier(PaillierError::Capacity { .. } | PaillierError::PrimeTooSmall(_)) => Kind::Config,
        FedError::Paillier(PaillierError::Format(_) | PaillierError::KeyMismatch { .. }) => Kind::Data,
        FedError::Detector(d) => detector_kind(d),
        FedError::Attack(a) => attack_kind(a),
        FedError::Metrics(_) | FedError::Message(_) | FedError::LayoutMismatch | FedError::Io(_) => Kind::Data,
        FedError::Paillier(_) | FedError::DecryptionMismatch { .. } | FedError::Fidelity { .. } => Kind::Numeric,
    }
}

fn experiment_kind(e: &ExperimentError) -> Kind {
    match e {
        ExperimentError::Config(_) => Kind::Config,
        ExperimentError::Data(_) => Kind::Data,
        ExperimentError::Federation(f) => fed_kind(f),
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Outcome<T>;
}

impl<T> Stage<T> for Result<T, ExperimentError> {
    fn stage(self, stage: &'static str) -> Outcome<T> {
        self.map_err(|e| fail(stage, experiment_kind(&e), e.to_string()))
    }
}

impl<T> Stage<T> for Result<T, FedError> {
    fn stage(self, stage: &'static str) -> Outcome<T> {
        self.map_err(|e| fail(stage, fed_kind(&e), e.to_string()))
    }
}

impl<T> Stage<T> for Result<T, AttackError> {
    fn stage(self, stage: &'static str) -> Outcome<T> {
        self.map_err(|e| fail(stage, attack_kind(&e), e.to_string()))
    }
}

impl<T> Stage<T> for Result<T, DetectorError> {
    fn stage(self, stage: &'static str) -> Outcome<T> {
        self.map_err(|e| fail(stage, detector_kind(&e), e.to_string()))
    }
}

/// Resolved workspace layout.
struct Paths {
    workspace: PathBuf,
    out: PathBuf,
}

impl Paths {
    fn keys(&self, file: &str) -> PathBuf {
        self.out.join("keys").join(file)
    }

    fn data(&self, client: usize, split: &str, ext: &str) -> PathBuf {
        self.out.join("data").join(format!("client{client}_{split}.{ext}"))
    }

    fn checkpoint(&self, set: ModelSet, client: usize) -> PathBuf {
        self.out.join("checkpoints").join(format!("{}_client{client}.json", set.name()))
    }

    fn log(&self, set: ModelSet) -> PathBuf {
        self.out.join("logs").join(format!("{}.jsonl", set.name()))
    }

    fn report(&self, name: &str, ext: &str) -> PathBuf {
        self.out.join("reports").join(format!("{name}.{ext}"))
    }
}

fn create_parent(path: &Path, stage: &'static str) -> Outcome<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| fail(stage, Kind::Data, format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T, stage: &'static str) -> Outcome<()> {
    create_parent(path, stage)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(stage, Kind::Data, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| fail(stage, Kind::Data, format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &'static str) -> Outcome<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail(stage, Kind::Data, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| fail(stage, Kind::Data, format!("{}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Outcome<ExperimentConfig> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(cli.workspace.join(path)).stage("config")?,
        None => {
            let strength = match cli.strength {
                Strength::Weak => AttackStrength::Weak,
                Strength::Strong => AttackStrength::Strong,
            };
            if cli.full {
                ExperimentConfig::full(strength)
            } else {
                ExperimentConfig::desk(strength)
            }
        }
    };
    config.validate().stage("config")?;
    Ok(config)
}

fn load_keys(paths: &Paths) -> Outcome<Trustee> {
    let public: PublicKey = read_json(&paths.keys("public.json"), "keys")?;
    let private: PrivateKey = read_json(&paths.keys("private.json"), "keys")?;
    Trustee::from_keys(public, private).stage("keys")
}

/// Reads every client's CSVs back and checks them against their sidecars.
fn load_datasets(config: &ExperimentConfig, paths: &Paths) -> Outcome<Vec<ClientDataset>> {
    let mut out = Vec::with_capacity(config.clients.len());
    for (t, spec) in config.clients.iter().enumerate() {
        let mut splits = Vec::with_capacity(2);
        for split in ["train", "test"] {
            let csv = paths.data(t, split, "csv");
            let sidecar = DatasetSidecar::read(paths.data(t, split, "meta.json")).stage("load data")?;
            let (layout, samples) = read_dataset_csv(&csv).stage("load data")?;
            let digest = dataset_digest(&layout, &samples).stage("load data")?;
            if digest != sidecar.csv_sha256 {
                return Err(fail("load data", Kind::Data, format!("{}: digest differs from its sidecar", csv.display())));
            }
            if sidecar.client != *spec || sidecar.seed != config.seed {
                return Err(fail(
                    "load data",
                    Kind::Data,
                    format!("{}: generated for another configuration", csv.display()),
                ));
            }
            splits.push((layout, samples));
        }
        let (test_layout, test) = splits.pop().expect("two splits");
        let (layout, train) = splits.pop().expect("two splits");
        if layout != test_layout {
            return Err(fail("load data", Kind::Data, format!("client {t}: train and test layouts differ")));
        }
        out.push(ClientDataset { client_id: t, client: *spec, layout, train, test });
    }
    Ok(out)
}

fn keygen(config: &ExperimentConfig, paths: &Paths) -> Outcome<()> {
    let trustee = trustee_for(config).stage("keygen")?;
    let (public, private) = trustee.distribute();
    write_json(&paths.keys("public.json"), &public, "keygen")?;
    write_json(&paths.keys("private.json"), &private, "keygen")?;
    log::info!("key {} ({} bit modulus)", public.key_id(), public.modulus_bits());
    Ok(())
}

fn generate_data(config: &ExperimentConfig, paths: &Paths) -> Outcome<()> {
    let case = config.load_case(&paths.workspace).stage("generate-data")?;
    let schema = config.schema(&case);
    let datasets = generate_client_datasets(config, &case).stage("generate-data")?;
    for d in &datasets {
        for (split, samples) in [("train", &d.train), ("test", &d.test)] {
            let csv = paths.data(d.client_id, split, "csv");
            create_parent(&csv, "generate-data")?;
            write_dataset_csv(&csv, &d.layout, samples).stage("generate-data")?;
            let sidecar = DatasetSidecar {
                seed: config.seed,
                case: case.name.clone(),
                schema: format!("{} entries, sigma {}", schema.entries.len(), config.measurement_sigma),
                strength_target: config.strength,
                noise_level: 0.0,
                client: d.client,
                split: split.into(),
                samples: samples.len(),
                injection_ratio_rule: DatasetSidecar::INJECTION_RATIO_RULE.into(),
                csv_sha256: dataset_digest(&d.layout, samples).stage("generate-data")?,
            };
            sidecar.write(paths.data(d.client_id, split, "meta.json")).stage("generate-data")?;
        }
        println!("client {} ({}): {} train, {} test rows", d.client_id, d.client, d.train.len(), d.test.len());
    }
    Ok(())
}

fn train(config: &ExperimentConfig, paths: &Paths, set: ModelSet) -> Outcome<()> {
    let stage = if set == ModelSet::Local { "train-local" } else { "train-federated" };
    let trustee = load_keys(paths)?;
    let datasets = load_datasets(config, paths)?;
    let initial = initial_weights(config).stage(stage)?;
    let mut clients = enroll_clients(datasets, &initial, &trustee).stage(stage)?;
    let logs = if set == ModelSet::Local {
        run_local_baseline(&mut clients, &config.model, &config.train_config()).stage(stage)?
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, STREAM_ENCRYPT, 0));
        run_secfed(&config.federation(), &mut clients, &mut rng).stage(stage)?
    };
    for c in &clients {
        let ckpt = Checkpoint::new(&config.model, c.weights(), &c.layout().digest(), Some(c.scaler().clone()))
            .stage(stage)?;
        let path = paths.checkpoint(set, c.id());
        create_parent(&path, stage)?;
        ckpt.save(&path).stage(stage)?;
    }
    let log_path = paths.log(set);
    create_parent(&log_path, stage)?;
    write_round_logs(&log_path, &logs).stage(stage)?;
    print_logs(&logs);
    Ok(())
}

fn print_logs(logs: &[RoundLog]) {
    for l in logs {
        let acc = |m: &fedgrid::metrics::Metrics| m.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        match &l.post_aggregation {
            Some(post) => println!(
                "round {} client {}: accuracy {} before, {} after aggregation",
                l.round,
                l.client_id,
                acc(&l.pre_aggregation),
                acc(post)
            ),
            None => println!("round {} client {}: accuracy {}", l.round, l.client_id, acc(&l.pre_aggregation)),
        }
    }
}

/// Weights and scaler of one client under a model set.
fn client_model(
    config: &ExperimentConfig,
    paths: &Paths,
    set: ModelSet,
    dataset: &ClientDataset,
    stage: &'static str,
) -> Outcome<(ModelWeights, FeatureScaler)> {
    if set == ModelSet::Initial {
        let scaler = FeatureScaler::fit(&dataset.train).stage(stage)?;
        return Ok((initial_weights(config).stage(stage)?, scaler));
    }
    let path = paths.checkpoint(set, dataset.client_id);
    let ckpt = Checkpoint::load(&path).map_err(|e| fail(stage, Kind::Data, format!("{}: {e}", path.display())))?;
    if ckpt.config != config.model {
        return Err(fail(stage, Kind::Config, format!("{}: model configuration differs", path.display())));
    }
    if ckpt.feature_layout != dataset.layout.digest() {
        return Err(fail(stage, Kind::Data, format!("{}: trained on another feature layout", path.display())));
    }
    let scaler = ckpt
        .scaler
        .clone()
        .ok_or_else(|| fail(stage, Kind::Data, format!("{}: no feature scaler", path.display())))?;
    Ok((ckpt.weights().stage(stage)?, scaler))
}

fn new_report(config: &ExperimentConfig, datasets: &[ClientDataset], stage: &'static str) -> Outcome<MetricsReport> {
    Ok(MetricsReport::new(config, fedgrid::experiment::dataset_digests(datasets).stage(stage)?))
}

fn write_report(report: &MetricsReport, paths: &Paths, name: &str, stage: &'static str) -> Outcome<()> {
    let json = paths.report(name, "json");
    create_parent(&json, stage)?;
    report.write(&json, paths.report(name, "csv")).stage(stage)?;
    println!("wrote {}", json.display());
    Ok(())
}

fn evaluate(config: &ExperimentConfig, paths: &Paths, set: ModelSet, baselines: bool) -> Outcome<()> {
    let stage = "evaluate";
    let datasets = load_datasets(config, paths)?;
    let mut report = new_report(config, &datasets, stage)?;
    for d in &datasets {
        let (weights, scaler) = client_model(config, paths, set, d, stage)?;
        let metrics = evaluate_model(&d.test, &weights, &config.model, &scaler).stage(stage)?;
        println!("client {}: accuracy {:.4}", d.client_id, metrics.accuracy.unwrap_or(f64::NAN));
        report.rows.push(ReportRow {
            model: "transformer".into(),
            stage: "final".into(),
            round: rounds_of(config, set),
            client_id: d.client_id,
            bus: d.client.bus,
            noise_level: 0.0,
            metrics,
        });
    }
    if baselines {
        let initial = initial_weights(config).stage(stage)?;
        report.rows.extend(run_baselines(config, &datasets, &initial).stage(stage)?);
    }
    write_report(&report, paths, &format!("evaluate_{}", set.name()), stage)
}

fn rounds_of(config: &ExperimentConfig, set: ModelSet) -> usize {
    if set == ModelSet::Federated {
        config.rounds
    } else {
        0
    }
}

fn noise_sweep(config: &ExperimentConfig, paths: &Paths, set: ModelSet) -> Outcome<()> {
    let stage = "noise-sweep";
    let datasets = load_datasets(config, paths)?;
    let mut report = new_report(config, &datasets, stage)?;
    let models = datasets
        .iter()
        .map(|d| client_model(config, paths, set, d, stage))
        .collect::<Outcome<Vec<_>>>()?;
    for (li, &level) in config.noise_levels.iter().enumerate() {
        for (d, (weights, scaler)) in datasets.iter().zip(&models) {
            let seed = derive_seed(config.seed, STREAM_NOISE_EVAL, (li * 1024 + d.client_id) as u64);
            let noisy = add_measurement_noise(&d.test, level, seed).stage(stage)?;
            let metrics = evaluate_model(&noisy, weights, &config.model, scaler).stage(stage)?;
            println!("noise {level}: client {} accuracy {:.4}", d.client_id, metrics.accuracy.unwrap_or(f64::NAN));
            report.rows.push(ReportRow {
                model: "transformer".into(),
                stage: "final".into(),
                round: rounds_of(config, set),
                client_id: d.client_id,
                bus: d.client.bus,
                noise_level: level,
                metrics,
            });
        }
    }
    write_report(&report, paths, &format!("noise_{}", set.name()), stage)
}

/// Accuracy per round (one line per round, client and stage).
fn accuracy_vs_round(report: &MetricsReport) -> String {
    let mut out = String::from("round,client_id,bus,stage,accuracy\n");
    for r in report.rows.iter().filter(|r| r.model == "transformer" && r.stage != "final") {
        let acc = r.metrics.accuracy.map(|a| format!("{a:?}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{acc}\n", r.round, r.client_id, r.bus, r.stage));
    }
    out
}

/// Accuracy per noise level (one line per level and client).
fn accuracy_vs_noise(report: &MetricsReport) -> String {
    let mut out = String::from("noise_level,client_id,bus,accuracy\n");
    for r in report.rows.iter().filter(|r| r.model == "transformer" && r.stage == "final" && r.noise_level > 0.0) {
        let acc = r.metrics.accuracy.map(|a| format!("{a:?}")).unwrap_or_default();
        out.push_str(&format!("{:?},{},{},{acc}\n", r.noise_level, r.client_id, r.bus));
    }
    out
}

fn report(config: &ExperimentConfig, paths: &Paths) -> Outcome<()> {
    let stage = "report";
    let datasets = load_datasets(config, paths)?;
    let mut report = new_report(config, &datasets, stage)?;
    let mut found = false;
    for set in [ModelSet::Local, ModelSet::Federated] {
        let path = paths.log(set);
        if path.exists() {
            report.push_round_logs(&read_round_logs(&path).stage(stage)?);
            found = true;
        }
    }
    for name in ["noise_federated", "noise_local", "evaluate_federated", "evaluate_local"] {
        let path = paths.report(name, "json");
        if !path.exists() {
            continue;
        }
        let part: MetricsReport = read_json(&path, stage)?;
        if part.config_hash != report.config_hash || part.dataset_digests != report.dataset_digests {
            return Err(fail(stage, Kind::Data, format!("{}: produced by another configuration", path.display())));
        }
        report.rows.extend(part.rows);
        found = true;
    }
    if !found {
        return Err(fail(stage, Kind::Data, "no round logs or evaluation reports to merge"));
    }
    write_report(&report, paths, "report", stage)?;
    for (name, text) in [("accuracy_vs_round", accuracy_vs_round(&report)), ("accuracy_vs_noise", accuracy_vs_noise(&report))] {
        let path = paths.report(name, "csv");
        std::fs::write(&path, text).map_err(|e| fail(stage, Kind::Data, format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome<()> {
    let config = load_config(cli)?;
    let paths = Paths { workspace: cli.workspace.clone(), out: cli.workspace.join(&config.output_dir) };
    match &cli.command {
        Command::Keygen => keygen(&config, &paths),
        Command::GenerateData => generate_data(&config, &paths),
        Command::TrainLocal => train(&config, &paths, ModelSet::Local),
        Command::TrainFederated => train(&config, &paths, ModelSet::Federated),
        Command::Evaluate { model, baselines } => evaluate(&config, &paths, *model, *baselines),
        Command::NoiseSweep { model } => noise_sweep(&config, &paths, *model),
        Command::Report => report(&config, &paths),
        Command::WriteConfig { path } => {
            let path = cli.workspace.join(path);
            create_parent(&path, "write-config")?;
            config.save(&path).stage("write-config")
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fedgrid: {} failed: {}", f.stage, f.message);
            ExitCode::from(f.kind.exit_code())
        }
    }
}
