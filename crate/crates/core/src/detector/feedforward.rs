//! Two-hidden-layer ReLU network used as a comparison baseline.
//!
//! Shares the flat weight storage, Adam loop and loss with the Transformer so
//! the two detectors differ only in architecture.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{bce_loss, sigmoid};
use super::train::{minibatch_adam, probabilities_with};
use super::weights::{ModelWeights, ParamSpec};
use super::{DetectorError, Prediction, TrainConfig, TrainOutcome};
use crate::attack::LabeledSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForwardConfig {
    pub input_features: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl FeedForwardConfig {
    /// Hidden widths 64 and 32.
    pub fn with_features(input_features: usize) -> Self {
        FeedForwardConfig { input_features, hidden1: 64, hidden2: 32 }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.input_features == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(DetectorError::InvalidConfig("feed-forward widths must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        let spec = |name: &str, shape: &[usize]| ParamSpec { name: name.into(), shape: shape.to_vec() };
        vec![
            spec("fc1.w", &[self.input_features, self.hidden1]),
            spec("fc1.b", &[self.hidden1]),
            spec("fc2.w", &[self.hidden1, self.hidden2]),
            spec("fc2.b", &[self.hidden2]),
            spec("out.w", &[self.hidden2]),
            spec("out.b", &[1]),
        ]
    }

    /// Glorot-uniform matrices and zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ModelWeights, DetectorError> {
        self.validate()?;
        let mut w = ModelWeights::zeros_with(self.layout());
        for (name, fan_in, fan_out) in [
            ("fc1.w", self.input_features, self.hidden1),
            ("fc2.w", self.hidden1, self.hidden2),
            ("out.w", self.hidden2, 1),
        ] {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w.slice_mut(name) {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(w)
    }

    fn check(&self, weights: &ModelWeights) -> Result<(), DetectorError> {
        self.validate()?;
        if weights.specs() != self.layout().as_slice() {
            return Err(DetectorError::LayoutMismatch("feed-forward weights".into()));
        }
        Ok(())
    }
}

struct Cache {
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    p: Array1<f64>,
}

fn forward(x: ArrayView2<f64>, w: &ModelWeights) -> Cache {
    let relu = |a: Array2<f64>| a.mapv(|v| v.max(0.0));
    let h1 = relu(x.dot(&w.mat("fc1.w")) + w.vector("fc1.b"));
    let h2 = relu(h1.dot(&w.mat("fc2.w")) + w.vector("fc2.b"));
    let b = w.slice("out.b")[0];
    let p = h2.dot(&w.vector("out.w")).mapv(|z| sigmoid(z + b));
    Cache { x: x.to_owned(), h1, h2, p }
}

fn backward(c: &Cache, labels: &[f64], w: &ModelWeights) -> (f64, ModelWeights) {
    let n = labels.len() as f64;
    let mut g = ModelWeights::zeros_with(w.specs().to_vec());
    let dz = Array1::from_iter(c.p.iter().zip(labels).map(|(&p, &y)| (p - y) / n));
    g.vector_mut("out.w").assign(&c.h2.t().dot(&dz));
    g.slice_mut("out.b")[0] = dz.sum();
    let out_w = w.vector("out.w");
    let mut d2 = Array2::from_shape_fn(c.h2.dim(), |(i, j)| dz[i] * out_w[j]);
    d2.zip_mut_with(&c.h2, |d, &h| *d = if h > 0.0 { *d } else { 0.0 });
    g.mat_mut("fc2.w").assign(&c.h1.t().dot(&d2));
    g.vector_mut("fc2.b").assign(&d2.sum_axis(Axis(0)));
    let mut d1 = d2.dot(&w.mat("fc2.w").t());
    d1.zip_mut_with(&c.h1, |d, &h| *d = if h > 0.0 { *d } else { 0.0 });
    g.mat_mut("fc1.w").assign(&c.x.t().dot(&d1));
    g.vector_mut("fc1.b").assign(&d1.sum_axis(Axis(0)));
    (bce_loss(&c.p, labels), g)
}

/// Same loop and seeding rules as [`super::train_local`].
pub fn train_feedforward(
    samples: &[LabeledSample],
    weights: &ModelWeights,
    config: &FeedForwardConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome, DetectorError> {
    config.check(weights)?;
    minibatch_adam(samples, weights, config.input_features, train, |x, y, w, _| {
        let cache = forward(x, w);
        if !cache.p.iter().all(|v| v.is_finite()) {
            return Err(DetectorError::NonFinite { layer: "feed-forward output".into() });
        }
        Ok(backward(&cache, y, w))
    })
}

pub fn predict_feedforward(
    samples: &[LabeledSample],
    weights: &ModelWeights,
    config: &FeedForwardConfig,
) -> Result<Vec<Prediction>, DetectorError> {
    config.check(weights)?;
    let probs = probabilities_with(samples, config.input_features, |x| Ok(forward(x, weights).p.to_vec()))?;
    Ok(probs.into_iter().map(Prediction::from_probability).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_at(x: &Array2<f64>, y: &[f64], w: &ModelWeights) -> f64 {
        bce_loss(&forward(x.view(), w).p, y)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = FeedForwardConfig { input_features: 5, hidden1: 6, hidden2: 4 };
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = cfg.init(&mut rng).unwrap();
            for name in ["fc1.b", "fc2.b"] {
                w.slice_mut(name).iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
            let x = Array2::from_shape_fn((7, 5), |_| rng.gen_range(-2.0..2.0));
            let y: Vec<f64> = (0..7).map(|i| (i % 2) as f64).collect();
            let (_, g) = backward(&forward(x.view(), &w), &y, &w);
            let h = 1e-6;
            for k in 0..w.len() {
                let mut plus = w.clone();
                plus.values_mut()[k] += h;
                let mut minus = w.clone();
                minus.values_mut()[k] -= h;
                let fd = (loss_at(&x, &y, &plus) - loss_at(&x, &y, &minus)) / (2.0 * h);
                let an = g.values()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed} param {k}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn learns_a_separable_rule() {
        let cfg = FeedForwardConfig::with_features(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<LabeledSample> = (0..400)
            .map(|_| {
                let f: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let label = u8::from(f[0] + 0.5 * f[2] > 0.0);
                LabeledSample { features: f, label }
            })
            .collect();
        let w0 = cfg.init(&mut rng).unwrap();
        let train = TrainConfig { learning_rate: 1e-2, epochs: 40, batch_size: 32, ..Default::default() };
        let out = train_feedforward(&samples, &w0, &cfg, &train).unwrap();
        assert!(out.loss_history.last().unwrap() < &out.loss_history[0]);
        let preds = predict_feedforward(&samples, &out.weights, &cfg).unwrap();
        let acc = preds.iter().zip(&samples).filter(|(p, s)| p.label == s.label).count() as f64 / 400.0;
        assert!(acc > 0.95, "{acc}");
        let again = train_feedforward(&samples, &w0, &cfg, &train).unwrap();
        assert_eq!(again.weights, out.weights);
    }

    #[test]
    fn rejects_foreign_layout() {
        let cfg = FeedForwardConfig::with_features(3);
        let other = FeedForwardConfig::with_features(4).init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = [LabeledSample { features: vec![0.0; 3], label: 0 }];
        assert!(matches!(predict_feedforward(&s, &other, &cfg), Err(DetectorError::LayoutMismatch(_))));
    }
}
