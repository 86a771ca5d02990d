//! Client feature slices, train/test partitioning and the CSV dataset format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AttackError, AttackStrength};
use crate::grid::{BranchEnd, MeasurementKind, MeasurementLocation, MeasurementSchema, MeasurementVector, NetworkCase};

/// A client observes every bus injection plus the flow on one branch incident
/// to its own bus. Buses are external labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClientSpec {
    pub bus: usize,
    pub branch: (usize, usize),
}

impl std::fmt::Display for ClientSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "bus {} / branch {}-{}", self.bus, self.branch.0, self.branch.1)
    }
}

/// Ordered feature column names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub columns: Vec<String>,
}

impl FeatureLayout {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Hex SHA-256 over the newline-joined column names.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.columns {
            h.update(c.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    /// 1 for compromised, 0 for normal.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub client: ClientSpec,
    pub layout: FeatureLayout,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Samples per class in each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl DatasetSizes {
    pub fn full() -> Self {
        DatasetSizes { train_per_class: 10_000, test_per_class: 1_000 }
    }

    pub fn total_per_class(&self) -> usize {
        self.train_per_class + self.test_per_class
    }
}

/// Schema positions of a client's features: P injections of all buses, Q
/// injections of all buses, then P and Q flow on the client's branch. The
/// flow is read at the client's end when the schema measures it there,
/// otherwise at the far end.
pub fn client_feature_indices(
    case: &NetworkCase,
    schema: &MeasurementSchema,
    client: &ClientSpec,
) -> Result<(Vec<usize>, FeatureLayout), AttackError> {
    let missing = |what: String| AttackError::Invalid(format!("schema does not measure {what}"));
    let bus = case
        .bus_position(client.bus)
        .ok_or_else(|| AttackError::Invalid(format!("unknown bus {}", client.bus)))?;
    let not_incident = AttackError::BranchNotIncident { bus: client.bus, branch: client.branch };
    if client.branch.0 != client.bus && client.branch.1 != client.bus {
        return Err(not_incident);
    }
    let (a, b) = match (case.bus_position(client.branch.0), case.bus_position(client.branch.1)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(not_incident),
    };
    let branch = case.find_branch(a, b).ok_or(not_incident)?;
    let near = if case.branches[branch].from_bus == bus { BranchEnd::From } else { BranchEnd::To };
    let far = if near == BranchEnd::From { BranchEnd::To } else { BranchEnd::From };

    let mut indices = Vec::with_capacity(2 * case.num_buses() + 2);
    for kind in [MeasurementKind::PInjection, MeasurementKind::QInjection] {
        for b in 0..case.num_buses() {
            let k = schema
                .find(kind, MeasurementLocation::Bus(b))
                .ok_or_else(|| missing(format!("{} at bus {}", kind.tag(), case.bus_label(b))))?;
            indices.push(k);
        }
    }
    let end = [near, far]
        .into_iter()
        .find(|&end| {
            [MeasurementKind::PFlow, MeasurementKind::QFlow]
                .iter()
                .all(|&kind| schema.find(kind, MeasurementLocation::Branch { branch, end }).is_some())
        })
        .ok_or_else(|| missing(format!("P and Q flow on branch {}-{}", client.branch.0, client.branch.1)))?;
    for kind in [MeasurementKind::PFlow, MeasurementKind::QFlow] {
        indices.push(schema.find(kind, MeasurementLocation::Branch { branch, end }).expect("checked above"));
    }
    let columns = indices.iter().map(|&k| schema.entries[k].label(case)).collect();
    Ok((indices, FeatureLayout { columns }))
}

fn project(z: &MeasurementVector, indices: &[usize], label: u8) -> LabeledSample {
    LabeledSample { features: indices.iter().map(|&k| z.values[k]).collect(), label }
}

/// Builds one client's dataset from the first `sizes.total_per_class()`
/// vectors of each pool: the leading `train_per_class` go to training and the
/// following `test_per_class` to testing.
pub fn extract_client_dataset(
    client_id: usize,
    client: &ClientSpec,
    normal: &[MeasurementVector],
    compromised: &[MeasurementVector],
    case: &NetworkCase,
    schema: &MeasurementSchema,
    sizes: DatasetSizes,
) -> Result<ClientDataset, AttackError> {
    if sizes.train_per_class == 0 || sizes.test_per_class == 0 {
        return Err(AttackError::Invalid("dataset sizes must be positive".into()));
    }
    let need = sizes.total_per_class();
    if normal.len() < need || compromised.len() < need {
        return Err(AttackError::Invalid(format!(
            "need {need} samples per class, have {} normal and {} compromised",
            normal.len(),
            compromised.len()
        )));
    }
    for z in normal.iter().chain(compromised).take(need) {
        z.check(schema)?;
    }
    let (indices, layout) = client_feature_indices(case, schema, client)?;
    let split = |range: std::ops::Range<usize>| -> Vec<LabeledSample> {
        normal[range.clone()]
            .iter()
            .map(|z| project(z, &indices, 0))
            .chain(compromised[range].iter().map(|z| project(z, &indices, 1)))
            .collect()
    };
    Ok(ClientDataset {
        client_id,
        client: *client,
        layout,
        train: split(0..sizes.train_per_class),
        test: split(sizes.train_per_class..need),
    })
}

/// Projects the same global sample events onto every client's features.
pub fn partition_clients(
    normal: &[MeasurementVector],
    compromised: &[MeasurementVector],
    case: &NetworkCase,
    schema: &MeasurementSchema,
    clients: &[ClientSpec],
    sizes: DatasetSizes,
) -> Result<Vec<ClientDataset>, AttackError> {
    if clients.is_empty() {
        return Err(AttackError::Invalid("no clients given".into()));
    }
    clients
        .iter()
        .enumerate()
        .map(|(id, c)| extract_client_dataset(id, c, normal, compromised, case, schema, sizes))
        .collect()
}

/// Provenance written next to every dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub seed: u64,
    pub case: String,
    pub schema: String,
    pub strength_target: AttackStrength,
    pub noise_level: f64,
    pub client: ClientSpec,
    pub split: String,
    pub samples: usize,
    pub injection_ratio_rule: String,
    /// Hex SHA-256 of the CSV file bytes.
    pub csv_sha256: String,
}

impl DatasetSidecar {
    pub const INJECTION_RATIO_RULE: &'static str =
        "sum |dP_i| / sum |P_i| over attacked buses, P_i the measured base injection";

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), AttackError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| AttackError::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| AttackError::Io(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, AttackError> {
        let text = std::fs::read_to_string(path).map_err(|e| AttackError::Io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| AttackError::Io(e.to_string()))
    }
}

/// Writes one row per sample; floats use the shortest exact decimal form.
pub fn write_dataset_csv(path: impl AsRef<Path>, layout: &FeatureLayout, samples: &[LabeledSample]) -> Result<(), AttackError> {
    let bytes = dataset_csv_bytes(layout, samples)?;
    std::fs::write(path, bytes).map_err(|e| AttackError::Io(e.to_string()))
}

/// The exact bytes [`write_dataset_csv`] puts on disk.
pub fn dataset_csv_bytes(layout: &FeatureLayout, samples: &[LabeledSample]) -> Result<Vec<u8>, AttackError> {
    let io = |e: csv::Error| AttackError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = layout.columns.clone();
    header.push("label".into());
    w.write_record(&header).map_err(io)?;
    for (i, s) in samples.iter().enumerate() {
        if s.features.len() != layout.len() {
            return Err(AttackError::Invalid(format!(
                "sample {i} has {} features, layout has {}",
                s.features.len(),
                layout.len()
            )));
        }
        let mut row: Vec<String> = s.features.iter().map(|v| format!("{v:?}")).collect();
        row.push(s.label.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.into_inner().map_err(|e| AttackError::Io(e.to_string()))
}

/// Hex SHA-256 of the CSV form.
pub fn dataset_digest(layout: &FeatureLayout, samples: &[LabeledSample]) -> Result<String, AttackError> {
    Ok(hex::encode(Sha256::digest(dataset_csv_bytes(layout, samples)?)))
}

pub fn read_dataset_csv(path: impl AsRef<Path>) -> Result<(FeatureLayout, Vec<LabeledSample>), AttackError> {
    let io = |e: csv::Error| AttackError::Io(e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let header: Vec<String> = r.headers().map_err(io)?.iter().map(str::to_string).collect();
    if header.last().map(String::as_str) != Some("label") {
        return Err(AttackError::Io("last column must be `label`".into()));
    }
    let layout = FeatureLayout { columns: header[..header.len() - 1].to_vec() };
    let mut samples = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(io)?;
        let bad = |what: &str| AttackError::Io(format!("row {}: {what}", i + 2));
        let mut fields: Vec<&str> = record.iter().collect();
        let label: u8 = fields.pop().ok_or_else(|| bad("empty row"))?.parse().map_err(|_| bad("bad label"))?;
        if label > 1 {
            return Err(bad("label must be 0 or 1"));
        }
        let features = fields
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<Vec<_>, _>>()?;
        samples.push(LabeledSample { features, label });
    }
    Ok((layout, samples))
}
