//! Flat parameter storage with a named layout, initialization and checkpoints.

use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::FeatureScaler;
use super::{DetectorError, TransformerConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All parameters in one contiguous vector; `specs` fixes names, shapes and order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    specs: Vec<ParamSpec>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

fn spec(name: impl Into<String>, shape: &[usize]) -> ParamSpec {
    ParamSpec { name: name.into(), shape: shape.to_vec() }
}

/// Parameter layout in canonical order.
pub(crate) fn layout(config: &TransformerConfig) -> Vec<ParamSpec> {
    let d = config.d_model;
    let mut specs = vec![spec("embed.w", &[d]), spec("embed.b", &[d])];
    for l in 0..config.num_blocks {
        let p = |s: &str| format!("block{l}.{s}");
        specs.extend([
            spec(p("wq"), &[d, d]),
            spec(p("wk"), &[d, d]),
            spec(p("wv"), &[d, d]),
            spec(p("wo"), &[d, d]),
            spec(p("ln1.gain"), &[d]),
            spec(p("ln1.bias"), &[d]),
            spec(p("ff.w1"), &[d, config.ff_hidden]),
            spec(p("ff.b1"), &[config.ff_hidden]),
            spec(p("ff.w2"), &[config.ff_hidden, d]),
            spec(p("ff.b2"), &[d]),
            spec(p("ln2.gain"), &[d]),
            spec(p("ln2.bias"), &[d]),
        ]);
    }
    specs.extend([
        spec("head.w1", &[d, config.head_hidden]),
        spec("head.b1", &[config.head_hidden]),
        spec("head.w2", &[config.head_hidden]),
        spec("head.b2", &[1]),
    ]);
    specs
}

impl ModelWeights {
    pub fn zeros_with(specs: Vec<ParamSpec>) -> Self {
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.len();
        }
        ModelWeights { specs, offsets, values: vec![0.0; total] }
    }

    pub fn zeros(config: &TransformerConfig) -> Self {
        Self::zeros_with(layout(config))
    }

    /// Glorot-uniform matrices (`+-sqrt(6 / (fan_in + fan_out))`), unit
    /// LayerNorm gains, zero biases. The embedding counts as a `1 x d` matrix
    /// and the output layer as `head_hidden x 1`.
    pub fn init<R: Rng>(config: &TransformerConfig, rng: &mut R) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut w = Self::zeros(config);
        for i in 0..w.specs.len() {
            let name = w.specs[i].name.clone();
            let (fan_in, fan_out) = match (name.as_str(), w.specs[i].shape.as_slice()) {
                ("embed.w", &[d]) => (1, d),
                ("head.w2", &[h]) => (h, 1),
                (_, &[r, c]) => (r, c),
                _ => {
                    if name.ends_with(".gain") {
                        w.slice_mut_at(i).fill(1.0);
                    }
                    continue;
                }
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w.slice_mut_at(i) {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(w)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Replaces all values, keeping the layout.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<(), DetectorError> {
        if values.len() != self.values.len() {
            return Err(DetectorError::DimensionMismatch {
                what: "weight vector".into(),
                expected: self.values.len(),
                found: values.len(),
            });
        }
        self.values = values;
        Ok(())
    }

    /// Hex SHA-256 over the names and shapes in order.
    pub fn layout_hash(&self) -> String {
        layout_hash(&self.specs)
    }

    pub fn same_layout(&self, other: &ModelWeights) -> bool {
        self.specs == other.specs
    }

    fn position(&self, name: &str) -> usize {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from layout"))
    }

    fn slice_mut_at(&mut self, i: usize) -> &mut [f64] {
        let (o, n) = (self.offsets[i], self.specs[i].len());
        &mut self.values[o..o + n]
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let i = self.position(name);
        &self.values[self.offsets[i]..self.offsets[i] + self.specs[i].len()]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let i = self.position(name);
        self.slice_mut_at(i)
    }

    pub fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        let i = self.position(name);
        let shape = &self.specs[i].shape;
        ArrayView2::from_shape((shape[0], shape[1]), self.slice(name)).expect("matrix parameter")
    }

    pub fn mat_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        let i = self.position(name);
        let (r, c) = (self.specs[i].shape[0], self.specs[i].shape[1]);
        ArrayViewMut2::from_shape((r, c), self.slice_mut_at(i)).expect("matrix parameter")
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(name))
    }

    pub fn vector_mut(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(self.slice_mut(name))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_layout(&self, config: &TransformerConfig) -> Result<(), DetectorError> {
        if self.specs != layout(config) {
            return Err(DetectorError::LayoutMismatch(format!(
                "weights have layout {}, config expects {}",
                self.layout_hash(),
                layout_hash(&layout(config))
            )));
        }
        Ok(())
    }
}

pub(crate) fn layout_hash(specs: &[ParamSpec]) -> String {
    let mut h = Sha256::new();
    for s in specs {
        h.update(s.name.as_bytes());
        for d in &s.shape {
            h.update(b":");
            h.update(d.to_string().as_bytes());
        }
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// On-disk model: layout descriptor plus flat values, guarded by hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TransformerConfig,
    pub config_hash: String,
    pub layout: Vec<ParamSpec>,
    pub layout_hash: String,
    /// Digest of the dataset feature layout the model was trained on.
    pub feature_layout: String,
    pub scaler: Option<FeatureScaler>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        config: &TransformerConfig,
        weights: &ModelWeights,
        feature_layout: &str,
        scaler: Option<FeatureScaler>,
    ) -> Result<Self, DetectorError> {
        weights.check_layout(config)?;
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            config: *config,
            config_hash: config.hash(),
            layout: weights.specs.clone(),
            layout_hash: weights.layout_hash(),
            feature_layout: feature_layout.to_string(),
            scaler,
            values: weights.values.clone(),
        })
    }

    /// Verifies version, hashes and sizes, then rebuilds the weights.
    pub fn weights(&self) -> Result<ModelWeights, DetectorError> {
        let fail = |m: String| Err(DetectorError::Checkpoint(m));
        if self.version != CHECKPOINT_VERSION {
            return fail(format!("unsupported version {}", self.version));
        }
        if self.config_hash != self.config.hash() {
            return fail("config hash mismatch".into());
        }
        if self.layout_hash != layout_hash(&self.layout) {
            return fail("layout hash mismatch".into());
        }
        let mut w = ModelWeights::zeros_with(self.layout.clone());
        w.check_layout(&self.config)?;
        w.set_values(self.values.clone())?;
        if !w.all_finite() {
            return fail("non-finite weight values".into());
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        let text = serde_json::to_string(self).map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| DetectorError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        let text = std::fs::read_to_string(path).map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
        c.weights()?;
        Ok(c)
    }
}
