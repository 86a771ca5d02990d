//! Transformer-encoder binary classifier for compromised measurement vectors.
//!
//! Every scalar feature becomes one token (shared `1 -> d_model` embedding plus
//! sinusoidal positions), passes through `num_blocks` encoder blocks
//! (multi-head attention, Add&Norm, ReLU feed-forward, dropout, Add&Norm), is
//! mean-pooled over tokens and mapped through two dense layers to a sigmoid
//! probability. Gradients are hand-derived reverse-mode passes over the same
//! batched computation.

mod feedforward;
mod layers;
mod model;
mod train;
mod weights;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use feedforward::{predict_feedforward, train_feedforward, FeedForwardConfig};
pub use layers::{
    add_norm, dropout, feed_forward, layer_norm, multi_head_attention, positional_encoding, self_attention,
    softmax_rows, LAYER_NORM_EPS,
};
pub use model::{backward, forward, forward_batch, ForwardCache, Gradient};
pub use train::{
    adam_step, evaluate_accuracy, predict, predict_batch, train_local, FeatureScaler, OptimizerState, Prediction,
    TrainOutcome,
};
pub use weights::{Checkpoint, ModelWeights, ParamSpec, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectorError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite values after {layer}")]
    NonFinite { layer: String },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("weight layout does not match the model ({0})")]
    LayoutMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Feature count, which is also the token sequence length.
    pub input_features: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub ff_hidden: usize,
    /// Width of the first dense layer of the classification head.
    pub head_hidden: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    /// Defaults: `d_model` 32, 4 heads, 3 blocks, feed-forward width 64,
    /// head width 16, dropout 0.1.
    pub fn with_features(input_features: usize) -> Self {
        TransformerConfig {
            input_features,
            d_model: 32,
            num_heads: 4,
            num_blocks: 3,
            ff_hidden: 64,
            head_hidden: 16,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_string()));
        if self.input_features == 0 {
            return bad("input_features must be positive");
        }
        if self.d_model < 2 {
            return bad("d_model must be at least 2");
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad("d_model must be divisible by num_heads");
        }
        if self.ff_hidden == 0 || self.head_hidden == 0 {
            return bad("hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 400,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DetectorError::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(DetectorError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(DetectorError::InvalidConfig("Adam constants out of range".into()));
        }
        Ok(())
    }
}
