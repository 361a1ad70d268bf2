//! Canonical and probability-sparse scaled dot-product attention.
//!
//! The sparse form measures how far each query's score distribution is
//! from uniform (log-sum-exp minus mean), estimates that measurement
//! from a logarithmic sample of keys, computes exact attention only for
//! the top-ranked queries, and hands every other query the (running)
//! mean of the values.

use crate::error::{Error, Result};
use crate::probe;
use crate::tensor::{Rng, Scalar, Tensor};

/// Everything one sparse attention call needs besides its inputs.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub head_dim: usize,
    /// Constant `c` controlling the active-query budget `u = c ln L_Q`.
    pub sampling_factor: f64,
    pub masked: bool,
    pub seed: u64,
}

impl AttentionSpec {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        AttentionSpec {
            heads,
            head_dim,
            sampling_factor: 5.0,
            masked: false,
            seed: 0,
        }
    }

    pub fn masked(mut self, masked: bool) -> Self {
        self.masked = masked;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_factor(mut self, c: f64) -> Self {
        self.sampling_factor = c;
        self
    }
}

/// Output of the sampled sparsity measurement.
#[derive(Clone, Debug)]
pub struct SparsityScores<S: Scalar> {
    /// Max-mean measurement per query.
    pub measure: Vec<S>,
    /// Queries granted exact attention, ascending.
    pub top_u_indices: Vec<usize>,
    /// Keys sampled for each query's measurement.
    pub sampled_key_indices: Vec<Vec<usize>>,
}

/// Active-query budget `u = min(ceil(c ln L_q), L_q)`, at least 1.
pub fn top_u_count(l_q: usize, c: f64) -> usize {
    let u = (c * (l_q as f64).ln()).ceil() as usize;
    u.clamp(1, l_q)
}

/// Per-query sample size `s = ceil(ln L_k)`, at least 1.
pub fn sample_count(l_k: usize) -> usize {
    let s = ((l_k as f64).ln()).ceil() as usize;
    s.clamp(1, l_k)
}

fn attention_shapes<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    masked: bool,
) -> Result<(usize, usize, usize)> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::Dim("attention inputs must be 2-D".into()));
    }
    let (l_q, d) = (q.shape()[0], q.shape()[1]);
    let (l_k, dk) = (k.shape()[0], k.shape()[1]);
    if d == 0 {
        return Err(Error::Dim("attention: head dimension is zero".into()));
    }
    if dk != d {
        return Err(Error::Dim(format!(
            "attention: query dim {d} and key dim {dk} differ"
        )));
    }
    if v.shape()[0] != l_k {
        return Err(Error::Dim(format!(
            "attention: {l_k} keys but {} value rows",
            v.shape()[0]
        )));
    }
    if masked && l_q != l_k {
        return Err(Error::Dim(format!(
            "masked attention requires square scores, got {l_q} queries x {l_k} keys"
        )));
    }
    Ok((l_q, l_k, d))
}

/// Exact scaled dot-product attention `Softmax(Q K^T / sqrt(d)) V`.
/// With `masked` set, position `i` attends only to keys `0..=i`.
pub fn full_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    masked: bool,
) -> Result<Tensor<S>> {
    let (l_q, l_k, d) = attention_shapes(q, k, v, masked)?;
    probe::add_dot_products((l_q * l_k) as u64);
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let scores = q.matmul(&k.transpose()?)?.scale(scale);
    let weights = if masked {
        let valid: Vec<usize> = (0..l_q).map(|i| i + 1).collect();
        scores.softmax_rows_limited(&valid)?
    } else {
        scores.softmax_rows()?
    };
    weights.matmul(v)
}

fn query_slice<S: Scalar>(q: &Tensor<S>, d_expected: usize) -> Result<&[S]> {
    let ok = match q.shape() {
        [d] => *d == d_expected,
        [1, d] => *d == d_expected,
        _ => false,
    };
    if !ok {
        return Err(Error::Dim(format!(
            "query shape {:?} does not match key dim {d_expected}",
            q.shape()
        )));
    }
    Ok(q.data())
}

/// Exact sparsity measurement of one query against all keys:
/// log-sum-exp of the scaled scores minus their arithmetic mean,
/// computed with max-shift stabilization.
pub fn sparsity_measure_exact<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>) -> Result<S> {
    if k.shape().len() != 2 {
        return Err(Error::Dim("sparsity measure: keys must be 2-D".into()));
    }
    let (l_k, d) = (k.shape()[0], k.shape()[1]);
    let qs = query_slice(q, d)?;
    probe::add_dot_products(l_k as u64);
    let inv_sqrt_d = S::from_f64(1.0 / (d as f64).sqrt());
    let kd = k.data();
    let mut scores = Vec::with_capacity(l_k);
    for j in 0..l_k {
        let mut dot = S::zero();
        for c in 0..d {
            dot += qs[c] * kd[j * d + c];
        }
        scores.push(dot * inv_sqrt_d);
    }
    let max = scores.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum_exp = S::zero();
    let mut sum = S::zero();
    for &s in &scores {
        sum_exp += (s - max).exp();
        sum += s;
    }
    let lse = max + sum_exp.ln();
    let mean = sum / S::from_usize(l_k);
    Ok(lse - mean)
}

fn scaled_scores_at<S: Scalar>(
    q_row: &[S],
    kd: &[S],
    d: usize,
    inv_sqrt_d: S,
    indices: &[usize],
) -> Vec<S> {
    probe::add_dot_products(indices.len() as u64);
    indices
        .iter()
        .map(|&j| {
            let mut dot = S::zero();
            for c in 0..d {
                dot += q_row[c] * kd[j * d + c];
            }
            dot * inv_sqrt_d
        })
        .collect()
}

fn max_mean<S: Scalar>(scores: &[S]) -> S {
    let max = scores.iter().cloned().fold(S::neg_infinity(), S::max);
    let mean =
        scores.iter().fold(S::zero(), |a, &b| a + b) / S::from_usize(scores.len());
    max - mean
}

/// Rank queries by the max-mean measurement computed over `ceil(ln L_k)`
/// sampled keys per query, and select the global Top-u. Ties break toward
/// the lower index.
pub fn sparsity_measure_sampled<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    c: f64,
    rng: &mut Rng,
) -> Result<SparsityScores<S>> {
    let l_k = k.shape().first().copied().unwrap_or(0);
    sparsity_measure_sampled_with(q, k, c, sample_count(l_k), rng)
}

/// As [`sparsity_measure_sampled`] with an explicit per-query sample
/// count; `s >= L_k` makes the measurement exhaustive.
pub fn sparsity_measure_sampled_with<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    c: f64,
    s: usize,
    rng: &mut Rng,
) -> Result<SparsityScores<S>> {
    let (l_q, l_k, d) = attention_shapes(q, k, k, false)?;
    let s = s.clamp(1, l_k);
    let inv_sqrt_d = S::from_f64(1.0 / (d as f64).sqrt());
    let qd = q.data();
    let kd = k.data();
    let mut measure = Vec::with_capacity(l_q);
    let mut sampled = Vec::with_capacity(l_q);
    for i in 0..l_q {
        let idx = rng.sample_indices(l_k, s);
        let scores = scaled_scores_at(&qd[i * d..(i + 1) * d], kd, d, inv_sqrt_d, &idx);
        measure.push(max_mean(&scores));
        sampled.push(idx);
    }
    let top_u_indices = select_top_u(&measure, top_u_count(l_q, c));
    Ok(SparsityScores {
        measure,
        top_u_indices,
        sampled_key_indices: sampled,
    })
}

fn select_top_u<S: Scalar>(measure: &[S], u: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..measure.len()).collect();
    order.sort_by(|&a, &b| {
        measure[b]
            .partial_cmp(&measure[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = order[..u.min(order.len())].to_vec();
    top.sort_unstable();
    top
}

/// Causal variant used by masked self-attention: query `i` samples only
/// keys `0..=i`, and is active when its measurement ranks inside the
/// prefix budget `min(ceil(c ln(i+1)), i+1)` among queries `0..=i`. Both
/// the measurement and the selection of a position therefore depend only
/// on that position's past, which keeps masked attention causal under
/// perturbations of later rows.
pub fn sparsity_measure_sampled_causal<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    c: f64,
    rng: &mut Rng,
) -> Result<SparsityScores<S>> {
    let (l_q, l_k, d) = attention_shapes(q, k, k, true)?;
    let s = sample_count(l_k);
    let inv_sqrt_d = S::from_f64(1.0 / (d as f64).sqrt());
    let qd = q.data();
    let kd = k.data();
    let mut measure = Vec::with_capacity(l_q);
    let mut sampled = Vec::with_capacity(l_q);
    for i in 0..l_q {
        let prefix = i + 1;
        let idx = rng.sample_indices(prefix, s.min(prefix));
        let scores = scaled_scores_at(&qd[i * d..(i + 1) * d], kd, d, inv_sqrt_d, &idx);
        measure.push(max_mean(&scores));
        sampled.push(idx);
    }
    let mut top = Vec::new();
    for i in 0..l_q {
        let budget = top_u_count(i + 1, c);
        // rank among the prefix; earlier rows win ties
        let rank = (0..i).filter(|&j| measure[j] >= measure[i]).count();
        if rank < budget {
            top.push(i);
        }
    }
    Ok(SparsityScores {
        measure,
        top_u_indices: top,
        sampled_key_indices: sampled,
    })
}

/// Probability-sparse attention: exact softmax rows for the selected
/// queries, mean of `V` for the rest (running mean up to the own
/// position in the masked form).
pub fn probsparse_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    spec: &AttentionSpec,
) -> Result<Tensor<S>> {
    let (l_q, l_k, d) = attention_shapes(q, k, v, spec.masked)?;
    let mut rng = Rng::seeded(spec.seed);
    let scores = if spec.masked {
        sparsity_measure_sampled_causal(q, k, spec.sampling_factor, &mut rng)?
    } else {
        sparsity_measure_sampled(q, k, spec.sampling_factor, &mut rng)?
    };
    probe::record_top_u(&scores.top_u_indices);

    let fallback = if spec.masked {
        v.cummean_rows()?
    } else {
        v.mean_rows()?.repeat_row(l_q)?
    };

    let top = &scores.top_u_indices;
    if top.is_empty() {
        return Ok(fallback);
    }
    let q_sel = q.gather_rows(top)?;
    probe::add_dot_products((top.len() * l_k) as u64);
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let sel_scores = q_sel.matmul(&k.transpose()?)?.scale(scale);
    let weights = if spec.masked {
        let valid: Vec<usize> = top.iter().map(|&i| i + 1).collect();
        sel_scores.softmax_rows_limited(&valid)?
    } else {
        sel_scores.softmax_rows()?
    };
    let out_sel = weights.matmul(v)?;
    fallback.merge_rows(&out_sel, top)
}

/// Per-head projection weights for multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiheadParams<S: Scalar> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
}

fn glorot<S: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor<S>> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.uniform(-limit, limit)))
        .collect();
    Tensor::param(&[rows, cols], data)
}

impl<S: Scalar> MultiheadParams<S> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(d_model: usize, heads: usize, head_dim: usize, rng: &mut Rng) -> Result<Self> {
        let inner = heads * head_dim;
        let zeros = |n: usize| Tensor::param(&[n], vec![S::zero(); n]);
        Ok(MultiheadParams {
            wq: glorot(d_model, inner, rng)?,
            bq: zeros(inner)?,
            wk: glorot(d_model, inner, rng)?,
            bk: zeros(inner)?,
            wv: glorot(d_model, inner, rng)?,
            bv: zeros(inner)?,
            wo: glorot(inner, d_model, rng)?,
            bo: zeros(d_model)?,
        })
    }

    /// Identity projections (square, bias-free); degenerate-case testing.
    pub fn identity(d_model: usize) -> Result<Self> {
        let eye = || -> Result<Tensor<S>> {
            Tensor::param(&[d_model, d_model], Tensor::<S>::eye(d_model).data().to_vec())
        };
        let zeros = || Tensor::param(&[d_model], vec![S::zero(); d_model]);
        Ok(MultiheadParams {
            wq: eye()?,
            bq: zeros()?,
            wk: eye()?,
            bk: zeros()?,
            wv: eye()?,
            bv: zeros()?,
            wo: eye()?,
            bo: zeros()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Full,
    ProbSparse,
}

fn derive_seed(seed: u64, idx: u64) -> u64 {
    // splitmix64 round over seed + site index
    let mut z = seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Multi-head attention over projected inputs. Each head runs its own
/// attention (with an independent sampling stream in the sparse case);
/// head outputs concatenate in head order and pass through the output
/// projection.
pub fn multihead<S: Scalar>(
    x_q: &Tensor<S>,
    x_kv: &Tensor<S>,
    params: &MultiheadParams<S>,
    spec: &AttentionSpec,
    kind: AttentionKind,
) -> Result<Tensor<S>> {
    if x_q.shape().len() != 2 || x_kv.shape().len() != 2 {
        return Err(Error::Dim("multihead inputs must be 2-D".into()));
    }
    let d_model = x_q.shape()[1];
    if x_kv.shape()[1] != d_model {
        return Err(Error::Dim(format!(
            "multihead: query width {d_model} and key/value width {} differ",
            x_kv.shape()[1]
        )));
    }
    if spec.heads == 0 || !d_model.is_multiple_of(spec.heads) {
        return Err(Error::Dim(format!(
            "multihead: d_model {d_model} not divisible by {} heads",
            spec.heads
        )));
    }
    let inner = spec.heads * spec.head_dim;
    if params.wq.shape() != [d_model, inner] {
        return Err(Error::Dim(format!(
            "multihead: projection shape {:?} does not match d_model {d_model} x {inner}",
            params.wq.shape()
        )));
    }

    let q = x_q.matmul(&params.wq)?.add_bias_row(&params.bq)?;
    let k = x_kv.matmul(&params.wk)?.add_bias_row(&params.bk)?;
    let v = x_kv.matmul(&params.wv)?.add_bias_row(&params.bv)?;

    let dh = spec.head_dim;
    let mut head_outs = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
        let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
        let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
        let out = match kind {
            AttentionKind::Full => full_attention(&qh, &kh, &vh, spec.masked)?,
            AttentionKind::ProbSparse => {
                let head_spec = AttentionSpec {
                    seed: derive_seed(spec.seed, h as u64),
                    ..spec.clone()
                };
                probsparse_attention(&qh, &kh, &vh, &head_spec)?
            }
        };
        head_outs.push(out);
    }
    let refs: Vec<&Tensor<S>> = head_outs.iter().collect();
    let concat = Tensor::concat_cols(&refs)?;
    concat.matmul(&params.wo)?.add_bias_row(&params.bo)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // oracles read clearest as plain index loops
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check, GradCheck};

    fn randt(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.standard_normal()).collect()).unwrap()
    }

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Direct per-row kernel-smoother evaluation: weights are the
    /// normalized exponential kernel of the scaled scores.
    fn kernel_smoother_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let (lq, d) = (q.rows(), q.cols());
        let lk = k.rows();
        let dv = v.cols();
        let mut out = vec![0.0; lq * dv];
        for i in 0..lq {
            let mut weights = vec![0.0; lk];
            let mut total = 0.0;
            for j in 0..lk {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.at(i, c) * k.at(j, c);
                }
                let w = (dot / (d as f64).sqrt()).exp();
                weights[j] = w;
                total += w;
            }
            for j in 0..lk {
                for c in 0..dv {
                    out[i * dv + c] += weights[j] / total * v.at(j, c);
                }
            }
        }
        Tensor::from_vec(&[lq, dv], out).unwrap()
    }

    #[test]
    fn single_key_attention_returns_value() {
        let q = Tensor::from_vec(&[1, 3], vec![0.2, -0.4, 1.0]).unwrap();
        let k = Tensor::from_vec(&[1, 3], vec![5.0, 2.0, -1.0]).unwrap();
        let v = Tensor::from_vec(&[1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let out = full_attention(&q, &k, &v, false).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn identical_keys_give_uniform_mix() {
        let mut rng = Rng::seeded(2);
        let q = randt(&[3, 2], &mut rng);
        let k = Tensor::from_vec(&[4, 2], [0.3, -0.7].repeat(4)).unwrap();
        let v = randt(&[4, 2], &mut rng);
        let out = full_attention(&q, &k, &v, false).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let mean: f64 = (0..4).map(|j| v.at(j, c)).sum::<f64>() / 4.0;
                assert!((out.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_attention_matches_kernel_smoother() {
        let mut rng = Rng::seeded(7);
        let q = randt(&[4, 2], &mut rng);
        let k = randt(&[4, 2], &mut rng);
        let v = randt(&[4, 2], &mut rng);
        let out = full_attention(&q, &k, &v, false).unwrap();
        let oracle = kernel_smoother_oracle(&q, &k, &v);
        assert!(max_abs_diff(&out, &oracle) < 1e-12);
    }

    #[test]
    fn measure_exact_trivial_cases() {
        let mut rng = Rng::seeded(4);
        // zero query: all scores equal, measurement hits the ln L_K floor
        let q = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        let k = randt(&[8, 4], &mut rng);
        let m = sparsity_measure_exact(&q, &k).unwrap();
        assert!((m - (8.0f64).ln()).abs() < 1e-12);

        // single key: ln 1 = 0
        let q = randt(&[1, 4], &mut rng);
        let k = randt(&[1, 4], &mut rng);
        assert!(sparsity_measure_exact(&q, &k).unwrap().abs() < 1e-12);
    }

    #[test]
    fn measure_exact_matches_naive_and_stays_in_bounds() {
        let mut rng = Rng::seeded(13);
        let l_k = 32;
        let d = 8;
        let q = randt(&[1, d], &mut rng);
        let k = randt(&[l_k, d], &mut rng);
        let m = sparsity_measure_exact(&q, &k).unwrap();

        // naive unstabilized evaluation
        let mut sum_exp = 0.0;
        let mut sum = 0.0;
        let mut max = f64::NEG_INFINITY;
        for j in 0..l_k {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q.data()[c] * k.at(j, c);
            }
            let s = dot / (d as f64).sqrt();
            sum_exp += s.exp();
            sum += s;
            max = max.max(s);
        }
        let naive = sum_exp.ln() - sum / l_k as f64;
        assert!((m - naive).abs() < 1e-10, "{m} vs naive {naive}");

        let ln_lk = (l_k as f64).ln();
        assert!(m >= ln_lk - 1e-9);
        assert!(m <= max - sum / l_k as f64 + ln_lk + 1e-9);
    }

    #[test]
    fn sampled_measure_trivial_and_exhaustive() {
        // all dot products equal -> max == mean -> measurement zero,
        // Top-u resolved by the ascending-index tie-break
        let q = Tensor::from_vec(&[8, 2], [1.0, 1.0].repeat(8)).unwrap();
        let k = Tensor::from_vec(&[8, 2], [0.5, -0.5].repeat(8)).unwrap();
        let mut rng = Rng::seeded(1);
        let scores: SparsityScores<f64> = sparsity_measure_sampled(&q, &k, 1.0, &mut rng).unwrap();
        assert!(scores.measure.iter().all(|&m| m.abs() < 1e-15));
        let u = top_u_count(8, 1.0);
        assert_eq!(scores.top_u_indices, (0..u).collect::<Vec<_>>());

        // exhaustive sample reproduces the exact max-mean measurement
        let mut rng = Rng::seeded(9);
        let q = randt(&[6, 3], &mut rng);
        let k = randt(&[6, 3], &mut rng);
        let mut srng = Rng::seeded(2);
        let scores = sparsity_measure_sampled_with(&q, &k, 5.0, 6, &mut srng).unwrap();
        for i in 0..6 {
            let mut row = [0.0; 6];
            for j in 0..6 {
                let mut dot = 0.0;
                for c in 0..3 {
                    dot += q.at(i, c) * k.at(j, c);
                }
                row[j] = dot / (3.0f64).sqrt();
            }
            let exact = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - row.iter().sum::<f64>() / 6.0;
            assert!((scores.measure[i] - exact).abs() < 1e-12);
            assert_eq!(scores.sampled_key_indices[i], vec![0, 1, 2, 3, 4, 5]);
        }
    }

    /// Overlap of the sampled-measurement Top-u with the exact-M Top-u,
    /// averaged over 100 seeds. The frozen bounds come from running the
    /// exact-M oracle itself: chance level is u^2/L ~ 6.9, the sampled
    /// estimator averages ~11-12 and the exhaustive max-mean ~17.
    #[test]
    fn topu_overlap_against_exact_measure() {
        let l = 64;
        let d = 8;
        let c = 5.0;
        let u = top_u_count(l, c);
        let mut overlap_sampled = 0usize;
        let mut overlap_exhaustive = 0usize;
        for seed in 0..100u64 {
            let mut rng = Rng::seeded(1000 + seed);
            let q = randt(&[l, d], &mut rng);
            let k = randt(&[l, d], &mut rng);
            let mut exact = Vec::with_capacity(l);
            for i in 0..l {
                let qi = q.slice_rows(i, i + 1).unwrap();
                exact.push(sparsity_measure_exact(&qi, &k).unwrap());
            }
            let top_exact = select_top_u(&exact, u);
            let mut srng = Rng::seeded(21 + seed);
            let sampled = sparsity_measure_sampled(&q, &k, c, &mut srng).unwrap();
            let mut erng = Rng::seeded(21 + seed);
            let exhaustive = sparsity_measure_sampled_with(&q, &k, c, l, &mut erng).unwrap();
            overlap_sampled += sampled
                .top_u_indices
                .iter()
                .filter(|i| top_exact.contains(i))
                .count();
            overlap_exhaustive += exhaustive
                .top_u_indices
                .iter()
                .filter(|i| top_exact.contains(i))
                .count();
        }
        let mean_sampled = overlap_sampled as f64 / 100.0;
        let mean_exhaustive = overlap_exhaustive as f64 / 100.0;
        let chance = (u * u) as f64 / l as f64;
        assert!(
            mean_sampled > chance + 3.0,
            "sampled overlap {mean_sampled} vs chance {chance}"
        );
        assert!(
            mean_exhaustive >= 15.5,
            "exhaustive overlap {mean_exhaustive} of u = {u}"
        );
        assert!(mean_exhaustive > mean_sampled);
    }

    #[test]
    fn probsparse_with_full_budget_equals_full_attention() {
        let mut rng = Rng::seeded(3);
        for &l in &[4usize, 16] {
            let q = randt(&[l, 4], &mut rng);
            let k = randt(&[l, 4], &mut rng);
            let v = randt(&[l, 4], &mut rng);
            let spec = AttentionSpec::new(1, 4).with_factor(l as f64).with_seed(5);
            let sparse = probsparse_attention(&q, &k, &v, &spec).unwrap();
            let full = full_attention(&q, &k, &v, false).unwrap();
            assert!(max_abs_diff(&sparse, &full) < 1e-12);
        }
    }

    #[test]
    fn probsparse_single_position() {
        let q = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let k = Tensor::from_vec(&[1, 2], vec![-1.0, 0.5]).unwrap();
        let v = Tensor::from_vec(&[1, 2], vec![3.0, -4.0]).unwrap();
        let spec = AttentionSpec::new(1, 2).with_seed(1);
        let out = probsparse_attention(&q, &k, &v, &spec).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn probsparse_fallback_rows_are_value_mean() {
        // u = 1 via a tiny sampling factor; non-selected rows must be the
        // plain mean of the basis-vector values.
        let mut rng = Rng::seeded(17);
        let q = randt(&[4, 4], &mut rng);
        let k = randt(&[4, 4], &mut rng);
        let mut vdata = vec![0.0; 16];
        for i in 0..4 {
            vdata[i * 4 + i] = 1.0;
        }
        let v = Tensor::from_vec(&[4, 4], vdata).unwrap();
        let spec = AttentionSpec::new(1, 4).with_factor(1e-9).with_seed(11);
        let out = probsparse_attention(&q, &k, &v, &spec).unwrap();
        let mut rng2 = Rng::seeded(11);
        let scores = sparsity_measure_sampled(&q, &k, 1e-9, &mut rng2).unwrap();
        assert_eq!(scores.top_u_indices.len(), 1);
        for i in 0..4 {
            if scores.top_u_indices.contains(&i) {
                continue;
            }
            for c in 0..4 {
                assert_eq!(out.at(i, c), 0.25, "row {i} must be mean(V)");
            }
        }
    }

    #[test]
    fn probsparse_selected_rows_match_full_attention() {
        let mut rng = Rng::seeded(23);
        let l = 64;
        let q = randt(&[l, 8], &mut rng);
        let k = randt(&[l, 8], &mut rng);
        let v = randt(&[l, 8], &mut rng);
        let spec = AttentionSpec::new(1, 8).with_seed(31);
        let sparse = probsparse_attention(&q, &k, &v, &spec).unwrap();
        let full = full_attention(&q, &k, &v, false).unwrap();
        let mut rng2 = Rng::seeded(31);
        let scores = sparsity_measure_sampled(&q, &k, 5.0, &mut rng2).unwrap();
        assert!(scores.top_u_indices.len() < l);
        for &i in &scores.top_u_indices {
            for c in 0..8 {
                assert!((sparse.at(i, c) - full.at(i, c)).abs() < 1e-12);
            }
        }
        // and the rest are exactly mean(V)
        for i in 0..l {
            if scores.top_u_indices.contains(&i) {
                continue;
            }
            for c in 0..8 {
                let mean: f64 = (0..l).map(|j| v.at(j, c)).sum::<f64>() / l as f64;
                assert_eq!(sparse.at(i, c), mean);
            }
        }
    }

    #[test]
    fn masked_causality_under_key_value_perturbation() {
        let l = 24;
        let mut rng = Rng::seeded(41);
        let q = randt(&[l, 4], &mut rng);
        let k = randt(&[l, 4], &mut rng);
        let v = randt(&[l, 4], &mut rng);
        let spec = AttentionSpec::new(1, 4).with_seed(77).masked(true);
        let base = probsparse_attention(&q, &k, &v, &spec).unwrap();
        for j in [3usize, 11, 20] {
            let mut kd = k.data().to_vec();
            let mut vd = v.data().to_vec();
            for c in 0..4 {
                kd[j * 4 + c] += 10.0;
                vd[j * 4 + c] -= 5.0;
            }
            let k2 = Tensor::from_vec(&[l, 4], kd).unwrap();
            let v2 = Tensor::from_vec(&[l, 4], vd).unwrap();
            let out = probsparse_attention(&q, &k2, &v2, &spec).unwrap();
            for i in 0..j {
                for c in 0..4 {
                    assert_eq!(out.at(i, c), base.at(i, c), "row {i} changed by key {j}");
                }
            }
            let changed = (j..l).any(|i| (0..4).any(|c| out.at(i, c) != base.at(i, c)));
            assert!(changed, "perturbation of row {j} had no effect at all");
        }
        // full attention masked: same property
        let fbase = full_attention(&q, &k, &v, true).unwrap();
        let mut kd = k.data().to_vec();
        kd[12 * 4] += 3.0;
        let k2 = Tensor::from_vec(&[l, 4], kd).unwrap();
        let fout = full_attention(&q, &k2, &v, true).unwrap();
        for i in 0..12 {
            for c in 0..4 {
                assert_eq!(fout.at(i, c), fbase.at(i, c));
            }
        }
    }

    #[test]
    fn masked_fallback_rows_are_running_mean() {
        let l = 32;
        let mut rng = Rng::seeded(53);
        let q = randt(&[l, 4], &mut rng);
        let k = randt(&[l, 4], &mut rng);
        let v = randt(&[l, 4], &mut rng);
        let spec = AttentionSpec::new(1, 4).with_seed(13).masked(true).with_factor(0.5);
        let out = probsparse_attention(&q, &k, &v, &spec).unwrap();
        let mut rng2 = Rng::seeded(13);
        let scores = sparsity_measure_sampled_causal(&q, &k, 0.5, &mut rng2).unwrap();
        assert!(scores.top_u_indices.len() < l);
        for i in 0..l {
            if scores.top_u_indices.contains(&i) {
                continue;
            }
            for c in 0..4 {
                let mean: f64 = (0..=i).map(|j| v.at(j, c)).sum::<f64>() / (i + 1) as f64;
                assert_eq!(out.at(i, c), mean, "row {i} must be running mean");
            }
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut rng = Rng::seeded(61);
        let q = randt(&[32, 8], &mut rng);
        let k = randt(&[32, 8], &mut rng);
        let v = randt(&[32, 8], &mut rng);
        let spec = AttentionSpec::new(1, 8).with_seed(123);
        let a = probsparse_attention(&q, &k, &v, &spec).unwrap();
        let b = probsparse_attention(&q, &k, &v, &spec).unwrap();
        assert_eq!(a.data(), b.data());
        let mut r1 = Rng::seeded(123);
        let mut r2 = Rng::seeded(123);
        let s1 = sparsity_measure_sampled(&q, &k, 5.0, &mut r1).unwrap();
        let s2 = sparsity_measure_sampled(&q, &k, 5.0, &mut r2).unwrap();
        assert_eq!(s1.top_u_indices, s2.top_u_indices);
    }

    #[test]
    fn multihead_identity_single_head_equals_plain_attention() {
        let mut rng = Rng::seeded(71);
        let x = randt(&[6, 4], &mut rng);
        let params = MultiheadParams::<f64>::identity(4).unwrap();
        let spec = AttentionSpec::new(1, 4);
        let out = multihead(&x, &x, &params, &spec, AttentionKind::Full).unwrap();
        let single = full_attention(&x, &x, &x, false).unwrap();
        assert!(max_abs_diff(&out, &single) < 1e-12);
    }

    #[test]
    fn multihead_output_shapes() {
        let mut rng = Rng::seeded(73);
        let d_model = 32;
        let x = randt(&[10, d_model], &mut rng);
        for &h in &[2usize, 8, 16] {
            let dh = d_model / h;
            let params = MultiheadParams::<f64>::init(d_model, h, dh, &mut rng).unwrap();
            let spec = AttentionSpec::new(h, dh).with_seed(7);
            let out = multihead(&x, &x, &params, &spec, AttentionKind::ProbSparse).unwrap();
            assert_eq!(out.shape(), &[10, d_model]);
        }
        // indivisible head count is a dimension error
        let params = MultiheadParams::<f64>::init(d_model, 2, 16, &mut rng).unwrap();
        let spec = AttentionSpec::new(3, 8);
        assert!(matches!(
            multihead(&x, &x, &params, &spec, AttentionKind::Full),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn heads_select_different_query_sets() {
        // Over 100 seeds, two heads should almost always disagree on
        // their selected query sets.
        let mut differing = 0;
        for seed in 0..100u64 {
            let mut rng = Rng::seeded(3000 + seed);
            let x = randt(&[64, 16], &mut rng);
            let params = MultiheadParams::<f64>::init(16, 2, 8, &mut rng).unwrap();
            let spec = AttentionSpec::new(2, 8).with_seed(seed);
            crate::probe::reset();
            crate::probe::capture_top_u(true);
            multihead(&x, &x, &params, &spec, AttentionKind::ProbSparse).unwrap();
            let log = crate::probe::top_u_log();
            crate::probe::capture_top_u(false);
            assert_eq!(log.len(), 2);
            if log[0] != log[1] {
                differing += 1;
            }
        }
        assert!(differing > 90, "only {differing}/100 seeds differed");
    }

    #[test]
    fn grad_flows_through_attention() {
        let mut rng = Rng::seeded(83);
        let shapes: Vec<(String, Tensor<f64>)> = [("q", 6), ("k", 6), ("v", 6)]
            .iter()
            .map(|(n, l)| {
                let data = (0..l * 4).map(|_| rng.standard_normal() * 0.5).collect();
                (n.to_string(), Tensor::param(&[*l, 4], data).unwrap())
            })
            .collect();
        // full, masked full, probsparse (fixed seed keeps selection stable
        // under the finite-difference nudges)
        for masked in [false, true] {
            let report = check(GradCheck::default(), &shapes, |ps| {
                full_attention(&ps[0].1, &ps[1].1, &ps[2].1, masked)?
                    .sum_all()
                    .mul(&Tensor::scalar(1.0))
            })
            .unwrap();
            assert!(report.passes(1e-4), "full masked={masked}: {:?}", report.worst);
        }
        for masked in [false, true] {
            let spec = AttentionSpec::new(1, 4).with_seed(5).with_factor(1.2).masked(masked);
            let report = check(GradCheck::default(), &shapes, |ps| {
                Ok(probsparse_attention(&ps[0].1, &ps[1].1, &ps[2].1, &spec)?.sum_all())
            })
            .unwrap();
            assert!(
                report.passes(1e-4),
                "probsparse masked={masked}: {:?}",
                report.worst
            );
        }
    }
}
