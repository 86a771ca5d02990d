//! Single-sequence building blocks. The batched model reuses the numerics here.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore};

use super::DetectorError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(what: &str, expected: usize, found: usize) -> DetectorError {
    DetectorError::DimensionMismatch { what: what.to_string(), expected, found }
}

/// `PE(p, 2k) = sin(p / 10000^(2k/d))`, `PE(p, 2k+1) = cos(p / 10000^(2k/d))`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Array2<f64> {
    Array2::from_shape_fn((seq_len, d_model), |(p, j)| {
        let k2 = (j - j % 2) as f64;
        let angle = p as f64 / 10000f64.powf(k2 / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Numerically stable softmax of every row.
pub fn softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `softmax(Q K' / sqrt(d_k)) V`.
pub fn self_attention(q: &ArrayView2<f64>, k: &ArrayView2<f64>, v: &ArrayView2<f64>) -> Result<Array2<f64>, DetectorError> {
    if q.ncols() != k.ncols() {
        return Err(mismatch("attention key width", q.ncols(), k.ncols()));
    }
    if k.nrows() != v.nrows() {
        return Err(mismatch("attention value rows", k.nrows(), v.nrows()));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let scores = q.dot(&k.t()) * scale;
    Ok(softmax_rows(&scores.view()).dot(v))
}

/// Heads split the projected columns evenly; their outputs are concatenated
/// and multiplied by `wo`.
pub fn multi_head_attention(
    x: &ArrayView2<f64>,
    wq: &ArrayView2<f64>,
    wk: &ArrayView2<f64>,
    wv: &ArrayView2<f64>,
    wo: &ArrayView2<f64>,
    num_heads: usize,
) -> Result<Array2<f64>, DetectorError> {
    let d = x.ncols();
    for (name, dim) in [("W_Q", wq.dim()), ("W_K", wk.dim()), ("W_V", wv.dim()), ("W_O", wo.dim())] {
        if dim != (d, d) {
            return Err(mismatch(&format!("{name} rows"), d, dim.0));
        }
    }
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(DetectorError::InvalidConfig("d_model must be divisible by num_heads".into()));
    }
    let dk = d / num_heads;
    let (q, k, v) = (x.dot(wq), x.dot(wk), x.dot(wv));
    let mut concat = Array2::zeros(x.dim());
    for h in 0..num_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let out = self_attention(&q.slice(cols), &k.slice(cols), &v.slice(cols))?;
        concat.slice_mut(cols).assign(&out);
    }
    Ok(concat.dot(wo))
}

/// Per-row normalization to zero mean and unit variance (biased, with
/// `LAYER_NORM_EPS`), then `gain * xhat + bias`.
pub fn layer_norm(x: &ArrayView2<f64>, gain: &ArrayView1<f64>, bias: &ArrayView1<f64>) -> Result<Array2<f64>, DetectorError> {
    if gain.len() != x.ncols() || bias.len() != x.ncols() {
        return Err(mismatch("layer norm width", x.ncols(), gain.len().min(bias.len())));
    }
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = gain[j] * (*v - mean) * inv + bias[j];
        }
    }
    Ok(out)
}

/// `LayerNorm(x + sublayer)`.
pub fn add_norm(
    x: &ArrayView2<f64>,
    sublayer: &ArrayView2<f64>,
    gain: &ArrayView1<f64>,
    bias: &ArrayView1<f64>,
) -> Result<Array2<f64>, DetectorError> {
    if x.dim() != sublayer.dim() {
        return Err(mismatch("residual rows", x.nrows() * x.ncols(), sublayer.nrows() * sublayer.ncols()));
    }
    layer_norm(&(x + sublayer).view(), gain, bias)
}

/// `max(0, x w1 + b1) w2 + b2`.
pub fn feed_forward(
    x: &ArrayView2<f64>,
    w1: &ArrayView2<f64>,
    b1: &ArrayView1<f64>,
    w2: &ArrayView2<f64>,
    b2: &ArrayView1<f64>,
) -> Result<Array2<f64>, DetectorError> {
    if w1.nrows() != x.ncols() || b1.len() != w1.ncols() || w2.nrows() != w1.ncols() || b2.len() != w2.ncols() {
        return Err(mismatch("feed-forward shapes", x.ncols(), w1.nrows()));
    }
    let hidden = (x.dot(w1) + b1).mapv(|v| v.max(0.0));
    Ok(hidden.dot(w2) + b2)
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// `1 / (1 - rate)`. Identity when `rng` is `None` or `rate` is 0.
pub fn dropout<R: RngCore + ?Sized>(x: &ArrayView2<f64>, rate: f64, rng: Option<&mut R>) -> Array2<f64> {
    match dropout_mask(x.dim(), rate, rng) {
        Some(mask) => x * &mask,
        None => x.to_owned(),
    }
}

/// Mask already multiplied by the survivor scale.
pub(crate) fn dropout_mask<R: RngCore + ?Sized>(
    dim: (usize, usize),
    rate: f64,
    rng: Option<&mut R>,
) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(Array2::from_shape_simple_fn(dim, || if rng.gen::<f64>() < rate { 0.0 } else { keep }))
}

/// Column sums, used for bias gradients.
pub(crate) fn column_sum(x: &ArrayView2<f64>) -> Array1<f64> {
    x.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(5, 6);
        for j in 0..6 {
            assert_eq!(pe[[0, j]], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe[[1, 0]] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((pe[[1, 1]] - 1f64.cos()).abs() < 1e-15);
        assert!((pe[[3, 2]] - (3.0 / 10000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-15);
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_query_gives_value_column_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, v) = (random(4, 3, &mut rng), random(4, 5, &mut rng));
        let out = self_attention(&Array2::zeros((2, 3)).view(), &k.view(), &v.view()).unwrap();
        let means = v.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(means.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_row_attention_returns_value_row() {
        let out = self_attention(&array![[0.3, -2.0]].view(), &array![[1.5, 0.2]].view(), &array![[4.0, 5.0, 6.0]].view())
            .unwrap();
        assert_eq!(out, array![[4.0, 5.0, 6.0]]);
    }

    #[test]
    fn attention_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (random(3, 4, &mut rng), random(3, 4, &mut rng), random(3, 4, &mut rng));
        let out = self_attention(&q.view(), &k.view(), &v.view()).unwrap();
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..4 {
                let expected: f64 = (0..3).map(|j| scores[j].exp() / z * v[[j, c]]).sum();
                assert!((out[[i, c]] - expected).abs() < 1e-12);
            }
        }
        assert!(self_attention(&q.view(), &random(3, 2, &mut rng).view(), &v.view()).is_err());
        assert!(self_attention(&q.view(), &k.view(), &random(2, 4, &mut rng).view()).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(6, 7, &mut rng) * 50.0;
        for row in softmax_rows(&x.view()).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_shapes_and_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(5, 4, &mut rng);
        let ws: Vec<Array2<f64>> = (0..4).map(|_| random(4, 4, &mut rng)).collect();
        let out = multi_head_attention(&x.view(), &ws[0].view(), &ws[1].view(), &ws[2].view(), &ws[3].view(), 2).unwrap();
        assert_eq!(out.dim(), x.dim());
        let one = multi_head_attention(&x.view(), &ws[0].view(), &ws[1].view(), &ws[2].view(), &ws[3].view(), 1).unwrap();
        let direct = self_attention(&x.dot(&ws[0]).view(), &x.dot(&ws[1]).view(), &x.dot(&ws[2]).view())
            .unwrap()
            .dot(&ws[3]);
        assert!((&one - &direct).iter().all(|v| v.abs() < 1e-12));
        let z = Array2::zeros((4, 4));
        let x2 = random(5, 4, &mut rng);
        let a = multi_head_attention(&x.view(), &z.view(), &z.view(), &z.view(), &z.view(), 2).unwrap();
        let b = multi_head_attention(&x2.view(), &z.view(), &z.view(), &z.view(), &z.view(), 2).unwrap();
        assert_eq!(a, b);
        assert!(multi_head_attention(&x.view(), &ws[0].view(), &ws[1].view(), &ws[2].view(), &ws[3].view(), 3).is_err());
    }

    #[test]
    fn layer_norm_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(4, 6, &mut rng);
        let (g, b) = (Array1::ones(6), Array1::zeros(6));
        let y = layer_norm(&x.view(), &g.view(), &b.view()).unwrap();
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 6.0;
            assert!((var - 1.0).abs() < 1e-3);
        }
        let zero = Array2::zeros((4, 6));
        assert_eq!(add_norm(&x.view(), &zero.view(), &g.view(), &b.view()).unwrap(), y);
        let constant = Array2::from_elem((2, 6), 3.0);
        let c = layer_norm(&constant.view(), &g.view(), &b.view()).unwrap();
        assert!(c.iter().all(|v| v.is_finite() && v.abs() < 1e-12));
        assert!(add_norm(&x.view(), &random(3, 6, &mut rng).view(), &g.view(), &b.view()).is_err());
    }

    #[test]
    fn feed_forward_at_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (w1, w2) = (random(3, 5, &mut rng), random(5, 3, &mut rng));
        let b1 = array![0.5, -0.2, 0.1, -1.0, 2.0];
        let b2 = array![0.3, 0.0, -0.3];
        let out = feed_forward(&Array2::zeros((2, 3)).view(), &w1.view(), &b1.view(), &w2.view(), &b2.view()).unwrap();
        let expected = b1.mapv(|v: f64| v.max(0.0)).dot(&w2) + &b2;
        for row in out.rows() {
            assert!((&row - &expected).iter().all(|v| v.abs() < 1e-15));
        }
        assert!(feed_forward(&Array2::zeros((2, 4)).view(), &w1.view(), &b1.view(), &w2.view(), &b2.view()).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let x = Array2::from_elem((1000, 1000), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = dropout(&x.view(), 0.5, Some(&mut rng));
        let zeros = y.iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.5).abs() < 0.002, "zero fraction {zeros}");
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(dropout(&x.view(), 0.0, Some(&mut rng)), x);
        assert_eq!(dropout::<ChaCha8Rng>(&x.view(), 0.5, None), x);
    }
}
