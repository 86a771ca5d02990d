//! Stealthy false-data-injection attacks against AC state estimation, and their
//! detection with Transformer classifiers trained by Paillier-secured
//! federated averaging.

pub mod attack;
pub mod detector;
pub mod estimation;
pub mod experiment;
pub mod fedlearn;
pub mod grid;
pub mod metrics;
pub mod paillier;
