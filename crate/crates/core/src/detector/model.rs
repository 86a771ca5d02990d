//! Batched forward pass with caches and its reverse-mode gradient.
//!
//! Token activations of a batch are stacked into a `(batch * F) x d_model`
//! matrix so every projection is one matrix product; attention runs per
//! sample and head on row/column blocks of that matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::RngCore;

use super::layers::{column_sum, dropout_mask, positional_encoding, softmax_rows, LAYER_NORM_EPS};
use super::weights::ModelWeights;
use super::{DetectorError, TransformerConfig};

/// Gradients share the weight layout.
pub type Gradient = ModelWeights;

const PROB_CLAMP: f64 = 1e-7;

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct BlockCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights indexed `[sample * heads + head]`.
    attention: Vec<Array2<f64>>,
    concat: Array2<f64>,
    norm1: NormCache,
    n1: Array2<f64>,
    z1: Array2<f64>,
    hidden: Array2<f64>,
    mask: Option<Array2<f64>>,
    norm2: NormCache,
}

pub struct ForwardCache {
    batch: usize,
    inputs: Array2<f64>,
    blocks: Vec<BlockCache>,
    last: Array2<f64>,
    pooled: Array2<f64>,
    head_z: Array2<f64>,
    head_u: Array2<f64>,
    pub probabilities: Array1<f64>,
}

fn norm_forward(x: &Array2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> (Array2<f64>, NormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let i = *inv;
        row.mapv_inplace(|v| (v - mean) * i);
    }
    let y = &xhat * &gain + bias;
    (y, NormCache { xhat, inv_std })
}

/// Returns `dx` and accumulates gain/bias gradients.
fn norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: ArrayView1<f64>,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Array2<f64> {
    let n = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for r in 0..dy.nrows() {
        let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..dy.ncols() {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            let g = dyr[j] * gain[j];
            mean_g += g;
            mean_gx += g * xh[j];
        }
        mean_g /= n;
        mean_gx /= n;
        let inv = cache.inv_std[r];
        for j in 0..dy.ncols() {
            dx[[r, j]] = inv * (dyr[j] * gain[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

fn check_finite(x: &Array2<f64>, layer: impl FnOnce() -> String) -> Result<(), DetectorError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DetectorError::NonFinite { layer: layer() })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward pass over a `(batch, F)` feature matrix. Dropout is active only
/// when `rng` is given.
pub fn forward_batch(
    inputs: ArrayView2<f64>,
    weights: &ModelWeights,
    config: &TransformerConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<ForwardCache, DetectorError> {
    let (batch, f) = inputs.dim();
    if f != config.input_features {
        return Err(DetectorError::DimensionMismatch {
            what: "feature vector".into(),
            expected: config.input_features,
            found: f,
        });
    }
    if batch == 0 {
        return Err(DetectorError::EmptyDataset);
    }
    let d = config.d_model;
    let (heads, dk) = (config.num_heads, config.d_k());
    let scale = 1.0 / (dk as f64).sqrt();

    let pe = positional_encoding(f, d);
    let (ew, eb) = (weights.vector("embed.w"), weights.vector("embed.b"));
    let mut h = Array2::zeros((batch * f, d));
    for b in 0..batch {
        for t in 0..f {
            let x = inputs[[b, t]];
            let mut row = h.row_mut(b * f + t);
            for j in 0..d {
                row[j] = x * ew[j] + eb[j] + pe[[t, j]];
            }
        }
    }
    check_finite(&h, || "embedding".into())?;

    let mut blocks = Vec::with_capacity(config.num_blocks);
    for l in 0..config.num_blocks {
        let p = |s: &str| format!("block{l}.{s}");
        let q = h.dot(&weights.mat(&p("wq")));
        let k = h.dot(&weights.mat(&p("wk")));
        let v = h.dot(&weights.mat(&p("wv")));
        let mut concat = Array2::zeros((batch * f, d));
        let mut attention = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = b * f..(b + 1) * f;
            for hd in 0..heads {
                let cols = hd * dk..(hd + 1) * dk;
                let qb = q.slice(s![rows.clone(), cols.clone()]);
                let kb = k.slice(s![rows.clone(), cols.clone()]);
                let vb = v.slice(s![rows.clone(), cols.clone()]);
                let mut scores = Array2::zeros((f, f));
                general_mat_mul(scale, &qb, &kb.t(), 0.0, &mut scores);
                let a = softmax_rows(&scores.view());
                general_mat_mul(1.0, &a, &vb, 0.0, &mut concat.slice_mut(s![rows.clone(), cols]));
                attention.push(a);
            }
        }
        let mha = concat.dot(&weights.mat(&p("wo")));
        let (n1, norm1) = norm_forward(&(&h + &mha), weights.vector(&p("ln1.gain")), weights.vector(&p("ln1.bias")));
        let z1 = n1.dot(&weights.mat(&p("ff.w1"))) + weights.vector(&p("ff.b1"));
        let hidden = z1.mapv(|v| v.max(0.0));
        let mut ff = hidden.dot(&weights.mat(&p("ff.w2"))) + weights.vector(&p("ff.b2"));
        let mask = dropout_mask(ff.dim(), config.dropout, rng.as_deref_mut());
        if let Some(m) = &mask {
            ff *= m;
        }
        let (out, norm2) = norm_forward(&(&n1 + &ff), weights.vector(&p("ln2.gain")), weights.vector(&p("ln2.bias")));
        check_finite(&out, || format!("encoder block {l}"))?;
        blocks.push(BlockCache { input: h, q, k, v, attention, concat, norm1, n1, z1, hidden, mask, norm2 });
        h = out;
    }

    let pooled = h.to_shape((batch, f, d)).expect("contiguous").mean_axis(Axis(1)).expect("F >= 1");
    let head_z = pooled.dot(&weights.mat("head.w1")) + weights.vector("head.b1");
    let head_u = head_z.mapv(|v| v.max(0.0));
    let logits = head_u.dot(&weights.vector("head.w2")) + weights.slice("head.b2")[0];
    let probabilities = logits.mapv(sigmoid);
    if !probabilities.iter().all(|v| v.is_finite()) {
        return Err(DetectorError::NonFinite { layer: "classification head".into() });
    }
    Ok(ForwardCache {
        batch,
        inputs: inputs.to_owned(),
        blocks,
        last: h,
        pooled,
        head_z,
        head_u,
        probabilities,
    })
}

/// Probability for a single feature vector.
pub fn forward(
    features: &[f64],
    weights: &ModelWeights,
    config: &TransformerConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<f64, DetectorError> {
    let x = ArrayView2::from_shape((1, features.len()), features).expect("row vector");
    Ok(forward_batch(x, weights, config, rng)?.probabilities[0])
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub(crate) fn bce_loss(probabilities: &Array1<f64>, labels: &[f64]) -> f64 {
    let n = labels.len() as f64;
    probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Mean BCE over the batch and its gradient. The gradient uses the unclamped
/// logit form `(p - y) / batch`, which equals the derivative of the loss
/// wherever the clamp is inactive.
pub fn backward(
    cache: &ForwardCache,
    labels: &[f64],
    weights: &ModelWeights,
    config: &TransformerConfig,
) -> Result<(f64, Gradient), DetectorError> {
    let batch = cache.batch;
    if labels.len() != batch {
        return Err(DetectorError::DimensionMismatch { what: "labels".into(), expected: batch, found: labels.len() });
    }
    let f = config.input_features;
    let d = config.d_model;
    let (heads, dk) = (config.num_heads, config.d_k());
    let scale = 1.0 / (dk as f64).sqrt();
    let loss = bce_loss(&cache.probabilities, labels);
    let mut grad = ModelWeights::zeros_with(weights.specs().to_vec());

    let dlogit: Array1<f64> =
        cache.probabilities.iter().zip(labels).map(|(p, y)| (p - y) / batch as f64).collect();
    grad.slice_mut("head.b2")[0] = dlogit.sum();
    grad.vector_mut("head.w2").assign(&cache.head_u.t().dot(&dlogit));
    let w2 = weights.vector("head.w2");
    let dz = Array2::from_shape_fn(cache.head_u.dim(), |(b, j)| {
        if cache.head_z[[b, j]] > 0.0 {
            dlogit[b] * w2[j]
        } else {
            0.0
        }
    });
    grad.vector_mut("head.b1").assign(&column_sum(&dz.view()));
    grad.mat_mut("head.w1").assign(&cache.pooled.t().dot(&dz));
    let dpooled = dz.dot(&weights.mat("head.w1").t()) / f as f64;

    let mut dh = Array2::zeros(cache.last.dim());
    for b in 0..batch {
        for t in 0..f {
            dh.row_mut(b * f + t).assign(&dpooled.row(b));
        }
    }

    for l in (0..config.num_blocks).rev() {
        let c = &cache.blocks[l];
        let p = |s: &str| format!("block{l}.{s}");

        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        let dr2 = norm_backward(&dh, &c.norm2, weights.vector(&p("ln2.gain")), &mut dgain, &mut dbias);
        grad.slice_mut(&p("ln2.gain")).copy_from_slice(&dgain);
        grad.slice_mut(&p("ln2.bias")).copy_from_slice(&dbias);

        let mut dff = dr2.clone();
        if let Some(m) = &c.mask {
            dff *= m;
        }
        grad.vector_mut(&p("ff.b2")).assign(&column_sum(&dff.view()));
        grad.mat_mut(&p("ff.w2")).assign(&c.hidden.t().dot(&dff));
        let mut dz1 = dff.dot(&weights.mat(&p("ff.w2")).t());
        dz1.zip_mut_with(&c.z1, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        grad.vector_mut(&p("ff.b1")).assign(&column_sum(&dz1.view()));
        grad.mat_mut(&p("ff.w1")).assign(&c.n1.t().dot(&dz1));
        let dn1 = dr2 + dz1.dot(&weights.mat(&p("ff.w1")).t());

        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        let dr1 = norm_backward(&dn1, &c.norm1, weights.vector(&p("ln1.gain")), &mut dgain, &mut dbias);
        grad.slice_mut(&p("ln1.gain")).copy_from_slice(&dgain);
        grad.slice_mut(&p("ln1.bias")).copy_from_slice(&dbias);

        grad.mat_mut(&p("wo")).assign(&c.concat.t().dot(&dr1));
        let dconcat = dr1.dot(&weights.mat(&p("wo")).t());
        let mut dq = Array2::zeros((batch * f, d));
        let mut dk_ = Array2::zeros((batch * f, d));
        let mut dv = Array2::zeros((batch * f, d));
        for b in 0..batch {
            let rows = b * f..(b + 1) * f;
            for hd in 0..heads {
                let cols = hd * dk..(hd + 1) * dk;
                let a = &c.attention[b * heads + hd];
                let dout = dconcat.slice(s![rows.clone(), cols.clone()]);
                let qb = c.q.slice(s![rows.clone(), cols.clone()]);
                let kb = c.k.slice(s![rows.clone(), cols.clone()]);
                let vb = c.v.slice(s![rows.clone(), cols.clone()]);
                let mut da = dout.dot(&vb.t());
                general_mat_mul(1.0, &a.t(), &dout, 0.0, &mut dv.slice_mut(s![rows.clone(), cols.clone()]));
                for (mut drow, arow) in da.rows_mut().into_iter().zip(a.rows()) {
                    let dot: f64 = drow.iter().zip(arow.iter()).map(|(x, y)| x * y).sum();
                    drow.zip_mut_with(&arow, |g, &av| *g = av * (*g - dot) * scale);
                }
                general_mat_mul(1.0, &da, &kb, 0.0, &mut dq.slice_mut(s![rows.clone(), cols.clone()]));
                general_mat_mul(1.0, &da.t(), &qb, 0.0, &mut dk_.slice_mut(s![rows.clone(), cols]));
            }
        }
        grad.mat_mut(&p("wq")).assign(&c.input.t().dot(&dq));
        grad.mat_mut(&p("wk")).assign(&c.input.t().dot(&dk_));
        grad.mat_mut(&p("wv")).assign(&c.input.t().dot(&dv));
        dh = dr1
            + dq.dot(&weights.mat(&p("wq")).t())
            + dk_.dot(&weights.mat(&p("wk")).t())
            + dv.dot(&weights.mat(&p("wv")).t());
    }

    let mut dew = vec![0.0; d];
    let mut deb = vec![0.0; d];
    for b in 0..batch {
        for t in 0..f {
            let x = cache.inputs[[b, t]];
            let row = dh.row(b * f + t);
            for j in 0..d {
                dew[j] += x * row[j];
                deb[j] += row[j];
            }
        }
    }
    grad.slice_mut("embed.w").copy_from_slice(&dew);
    grad.slice_mut("embed.b").copy_from_slice(&deb);
    if !grad.all_finite() {
        return Err(DetectorError::NonFinite { layer: "gradient".into() });
    }
    Ok((loss, grad))
}
