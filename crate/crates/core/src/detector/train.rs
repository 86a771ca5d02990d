//! Feature scaling, Adam, minibatch training and prediction.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{backward, forward_batch};
use super::weights::ModelWeights;
use super::{DetectorError, TrainConfig, TransformerConfig};
use crate::attack::LabeledSample;

const PREDICT_CHUNK: usize = 256;

/// Per-feature z-score fitted on a training set. Features with (near) zero
/// spread keep unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(samples: &[LabeledSample]) -> Result<Self, DetectorError> {
        let first = samples.first().ok_or(DetectorError::EmptyDataset)?;
        let f = first.features.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; f];
        for s in samples {
            if s.features.len() != f {
                return Err(DetectorError::DimensionMismatch {
                    what: "feature vector".into(),
                    expected: f,
                    found: s.features.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(&s.features) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; f];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(&s.features).zip(&mean) {
                *acc += (v - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Ok(FeatureScaler { mean, std })
    }

    pub fn transform(&self, features: &[f64]) -> Vec<f64> {
        features.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn transform_samples(&self, samples: &[LabeledSample]) -> Vec<LabeledSample> {
        samples
            .iter()
            .map(|s| LabeledSample { features: self.transform(&s.features), label: s.label })
            .collect()
    }
}

/// Adam moments in the weight layout plus the count of completed updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState { first: vec![0.0; len], second: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update with time step `e = state.step + 1`.
pub fn adam_step(
    weights: &mut ModelWeights,
    gradient: &ModelWeights,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<(), DetectorError> {
    if !weights.same_layout(gradient) || state.first.len() != weights.len() || state.second.len() != weights.len() {
        return Err(DetectorError::LayoutMismatch("Adam update".into()));
    }
    let e = (state.step + 1) as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(e);
    let c2 = 1.0 - b2.powi(e);
    let g = gradient.values();
    for (i, w) in weights.values_mut().iter_mut().enumerate() {
        let f = b1 * state.first[i] + (1.0 - b1) * g[i];
        let s = b2 * state.second[i] + (1.0 - b2) * g[i] * g[i];
        state.first[i] = f;
        state.second[i] = s;
        *w -= config.learning_rate * (f / c1) / ((s / c2).sqrt() + config.epsilon);
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Mean training loss of every epoch.
    pub loss_history: Vec<f64>,
}

fn batch_matrix(samples: &[LabeledSample], idx: &[usize], f: usize) -> Result<(Array2<f64>, Vec<f64>), DetectorError> {
    let mut x = Array2::zeros((idx.len(), f));
    let mut y = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        let s = &samples[i];
        if s.features.len() != f {
            return Err(DetectorError::DimensionMismatch {
                what: "feature vector".into(),
                expected: f,
                found: s.features.len(),
            });
        }
        x.row_mut(r).assign(&ndarray::ArrayView1::from(&s.features[..]));
        y.push(f64::from(s.label));
    }
    Ok((x, y))
}

/// `epochs` passes of shuffled minibatch Adam from fresh optimizer state.
/// Shuffling and dropout draw from one ChaCha8 stream seeded by `train.seed`.
pub fn train_local(
    samples: &[LabeledSample],
    weights: &ModelWeights,
    model: &TransformerConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome, DetectorError> {
    model.validate()?;
    weights.check_layout(model)?;
    minibatch_adam(samples, weights, model.input_features, train, |x, y, w, rng| {
        let cache = forward_batch(x, w, model, Some(rng))?;
        backward(&cache, y, w, model)
    })
}

/// Shared training loop: `step` returns the mean batch loss and its gradient.
pub(crate) fn minibatch_adam<F>(
    samples: &[LabeledSample],
    weights: &ModelWeights,
    features: usize,
    train: &TrainConfig,
    mut step: F,
) -> Result<TrainOutcome, DetectorError>
where
    F: FnMut(ArrayView2<'_, f64>, &[f64], &ModelWeights, &mut ChaCha8Rng) -> Result<(f64, ModelWeights), DetectorError>,
{
    train.validate()?;
    if samples.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    let mut w = weights.clone();
    let mut state = OptimizerState::new(w.len());
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(train.batch_size).enumerate() {
            let (x, y) = batch_matrix(samples, idx, features)?;
            let (loss, grad) = step(x.view(), &y, &w, &mut rng)?;
            if !loss.is_finite() {
                return Err(DetectorError::NonFiniteLoss { epoch, batch: b });
            }
            total += loss * idx.len() as f64;
            adam_step(&mut w, &grad, &mut state, train)?;
        }
        let mean = total / samples.len() as f64;
        log::trace!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(TrainOutcome { weights: w, loss_history: history })
}

/// Probabilities over many samples, computed in fixed-size chunks.
pub(crate) fn probabilities_with<F>(samples: &[LabeledSample], features: usize, mut forward: F) -> Result<Vec<f64>, DetectorError>
where
    F: FnMut(ArrayView2<'_, f64>) -> Result<Vec<f64>, DetectorError>,
{
    let mut out = Vec::with_capacity(samples.len());
    let all: Vec<usize> = (0..samples.len()).collect();
    for idx in all.chunks(PREDICT_CHUNK) {
        let (x, _) = batch_matrix(samples, idx, features)?;
        out.extend(forward(x.view())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// 1 iff `probability >= 0.5`.
    pub label: u8,
    pub probability: f64,
}

impl Prediction {
    pub fn from_probability(probability: f64) -> Self {
        Prediction { label: u8::from(probability >= 0.5), probability }
    }
}

pub fn predict(features: &[f64], weights: &ModelWeights, config: &TransformerConfig) -> Result<Prediction, DetectorError> {
    let p = super::model::forward(features, weights, config, None)?;
    Ok(Prediction::from_probability(p))
}

/// Inference over many samples in fixed-size chunks.
pub fn predict_batch(
    samples: &[LabeledSample],
    weights: &ModelWeights,
    config: &TransformerConfig,
) -> Result<Vec<Prediction>, DetectorError> {
    let probs = probabilities_with(samples, config.input_features, |x| {
        Ok(forward_batch(x, weights, config, None)?.probabilities.to_vec())
    })?;
    Ok(probs.into_iter().map(Prediction::from_probability).collect())
}

pub fn evaluate_accuracy(
    samples: &[LabeledSample],
    weights: &ModelWeights,
    config: &TransformerConfig,
) -> Result<f64, DetectorError> {
    if samples.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    let preds = predict_batch(samples, weights, config)?;
    let correct = preds.iter().zip(samples).filter(|(p, s)| p.label == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(features: usize) -> TransformerConfig {
        TransformerConfig {
            input_features: features,
            d_model: 8,
            num_heads: 2,
            num_blocks: 1,
            ff_hidden: 16,
            head_hidden: 4,
            dropout: 0.1,
        }
    }

    /// 20 samples split by the sign of the first feature.
    fn separable(rng: &mut ChaCha8Rng) -> Vec<LabeledSample> {
        (0..20)
            .map(|i| {
                let label = (i % 2) as u8;
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let features = vec![sign * rng.gen_range(0.5..1.5), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                LabeledSample { features, label }
            })
            .collect()
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let cfg = tiny(3);
        let mut w = ModelWeights::zeros(&cfg);
        let mut g = ModelWeights::zeros(&cfg);
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 3.0 } else { -0.01 };
        }
        let tc = TrainConfig { learning_rate: 0.01, ..Default::default() };
        let mut st = OptimizerState::new(w.len());
        adam_step(&mut w, &g, &mut st, &tc).unwrap();
        for (i, v) in w.values().iter().enumerate() {
            let gi: f64 = if i % 2 == 0 { 3.0 } else { -0.01 };
            assert!((v + 0.01 * gi / (gi.abs() + 1e-8)).abs() < 1e-15);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let cfg = tiny(3);
        let mut w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = w.clone();
        let g = ModelWeights::zeros(&cfg);
        let mut st = OptimizerState::new(w.len());
        for _ in 0..50 {
            adam_step(&mut w, &g, &mut st, &TrainConfig::default()).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn adam_scalar_recurrence_oracle() {
        let cfg = tiny(3);
        let mut w = ModelWeights::zeros(&cfg);
        let mut g = ModelWeights::zeros(&cfg);
        g.values_mut().fill(1.0);
        let tc = TrainConfig { learning_rate: 0.1, ..Default::default() };
        let mut st = OptimizerState::new(w.len());
        let (mut f, mut s, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for e in 1..=10 {
            adam_step(&mut w, &g, &mut st, &tc).unwrap();
            f = 0.9 * f + 0.1;
            s = 0.999 * s + 0.001;
            let fh = f / (1.0 - 0.9f64.powi(e));
            let sh = s / (1.0 - 0.999f64.powi(e));
            x -= 0.1 * fh / (sh.sqrt() + 1e-8);
            assert!((w.values()[0] - x).abs() < 1e-14, "step {e}");
        }
        assert!((x + 1.0).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_layout_mismatch() {
        let mut w = ModelWeights::zeros(&tiny(3));
        let g = ModelWeights::zeros(&TransformerConfig { num_blocks: 2, ..tiny(3) });
        let mut st = OptimizerState::new(w.len());
        assert!(adam_step(&mut w, &g, &mut st, &TrainConfig::default()).is_err());
    }

    #[test]
    fn learns_separable_toy_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = separable(&mut rng);
        let cfg = tiny(3);
        let w = ModelWeights::init(&cfg, &mut rng).unwrap();
        let tc = TrainConfig { learning_rate: 1e-2, epochs: 200, batch_size: 8, seed: 3, ..Default::default() };
        let out = train_local(&data, &w, &cfg, &tc).unwrap();
        assert_eq!(evaluate_accuracy(&data, &out.weights, &cfg).unwrap(), 1.0);
        assert_eq!(out.loss_history.len(), 200);
    }

    #[test]
    fn loss_decreases_at_default_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = separable(&mut rng);
        let cfg = TransformerConfig { dropout: 0.0, ..tiny(3) };
        let w = ModelWeights::init(&cfg, &mut rng).unwrap();
        let tc = TrainConfig { epochs: 10, batch_size: 20, seed: 1, ..Default::default() };
        let out = train_local(&data, &w, &cfg, &tc).unwrap();
        let h = &out.loss_history;
        assert!(h.windows(2).all(|p| p[1] < p[0]), "{h:?}");
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = separable(&mut rng);
        let cfg = tiny(3);
        let w = ModelWeights::init(&cfg, &mut rng).unwrap();
        let none = train_local(&data, &w, &cfg, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(none.weights, w);
        let tc = TrainConfig { learning_rate: 1e-3, epochs: 5, batch_size: 6, seed: 9, ..Default::default() };
        let a = train_local(&data, &w, &cfg, &tc).unwrap();
        let b = train_local(&data, &w, &cfg, &tc).unwrap();
        assert_eq!(a, b);
        let c = train_local(&data, &w, &cfg, &TrainConfig { seed: 10, ..tc }).unwrap();
        assert_ne!(a.weights, c.weights);
        assert!(matches!(train_local(&[], &w, &cfg, &tc), Err(DetectorError::EmptyDataset)));
    }

    #[test]
    fn prediction_tie_rule() {
        assert_eq!(Prediction::from_probability(0.5).label, 1);
        assert_eq!(Prediction::from_probability(0.49).label, 0);
    }

    #[test]
    fn random_weights_give_mixed_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = TransformerConfig { dropout: 0.0, ..tiny(3) };
        let mut ones = 0;
        let trials = 40;
        for _ in 0..trials {
            let w = ModelWeights::init(&cfg, &mut rng).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            ones += predict(&x, &w, &cfg).unwrap().label as usize;
        }
        assert!(ones > 0 && ones < trials, "{ones} of {trials}");
    }

    #[test]
    fn scaler_standardizes_training_set() {
        let samples: Vec<LabeledSample> = (0..10)
            .map(|i| LabeledSample { features: vec![i as f64, 5.0, -2.0 * i as f64], label: 0 })
            .collect();
        let s = FeatureScaler::fit(&samples).unwrap();
        let t = s.transform_samples(&samples);
        for j in [0, 2] {
            let m: f64 = t.iter().map(|x| x.features[j]).sum::<f64>() / 10.0;
            let v: f64 = t.iter().map(|x| x.features[j].powi(2)).sum::<f64>() / 10.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert!(t.iter().all(|x| x.features[1] == 0.0));
        assert_eq!(s.std[1], 1.0);
    }

    #[test]
    fn batch_prediction_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = tiny(3);
        let w = ModelWeights::init(&cfg, &mut rng).unwrap();
        let data: Vec<LabeledSample> = (0..300)
            .map(|_| LabeledSample { features: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), label: 0 })
            .collect();
        let batch = predict_batch(&data, &w, &cfg).unwrap();
        for (s, p) in data.iter().zip(&batch).step_by(37) {
            let single = predict(&s.features, &w, &cfg).unwrap();
            assert_eq!(single.label, p.label);
            assert!((single.probability - p.probability).abs() < 1e-12);
        }
    }
}
