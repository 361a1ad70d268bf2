//! Instrumentation for the complexity and statistical claims:
//! dot-product counting, activation-memory accounting, decode-step
//! counting, the measurement-ranking agreement test, and the long-tail
//! attention-mass diagnostic.

use crate::attention::{full_attention, probsparse_attention, AttentionKind, AttentionSpec};
use crate::data::WindowSample;
use crate::encoder::StackSpec;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::probe;
use crate::tensor::{no_grad, Rng, Scalar, Tensor};

/// Exact instrumented counts for one measured run. Wall-clock time is
/// informational only; assertions elsewhere use the integer counters.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub mode: AttentionKind,
    pub l: usize,
    /// Query-key dot products evaluated, per head.
    pub dot_products: u64,
    /// Time lengths entering each attention layer, per stack.
    pub stack_activation_lengths: Vec<Vec<usize>>,
    pub decoder_forwards: u64,
    pub wall_clock_ms: f64,
}

impl CostReport {
    /// One structured text record.
    pub fn to_line(&self) -> String {
        let mode = match self.mode {
            AttentionKind::Full => "full",
            AttentionKind::ProbSparse => "probsparse",
        };
        format!(
            "mode={mode} L={} dot_products={} decoder_forwards={} wall_clock_ms={:.3}",
            self.l, self.dot_products, self.decoder_forwards, self.wall_clock_ms
        )
    }
}

/// Closed-form dot-product count of one sparse attention call:
/// `L * ceil(ln L)` sampling dots plus `u * L` for the selected rows.
pub fn expected_probsparse_dots(l: usize, c: f64) -> u64 {
    let s = crate::attention::sample_count(l) as u64;
    let u = crate::attention::top_u_count(l, c) as u64;
    (l as u64) * s + u * (l as u64)
}

/// Run one single-head attention call of the given mode over random
/// `L x d` inputs and report the instrumented counters.
pub fn count_dot_products<S: Scalar>(
    mode: AttentionKind,
    l: usize,
    d: usize,
    c: f64,
    seed: u64,
) -> Result<CostReport> {
    if l < 2 {
        return Err(Error::Config("count_dot_products requires L >= 2".into()));
    }
    let mut rng = Rng::seeded(seed);
    let mut draw = |n: usize| -> Result<Tensor<S>> {
        Tensor::from_vec(
            &[l, d],
            (0..n).map(|_| S::from_f64(rng.standard_normal())).collect(),
        )
    };
    let q = draw(l * d)?;
    let k = draw(l * d)?;
    let v = draw(l * d)?;
    probe::reset();
    let start = std::time::Instant::now();
    no_grad(|| match mode {
        AttentionKind::Full => full_attention(&q, &k, &v, false),
        AttentionKind::ProbSparse => {
            let spec = AttentionSpec::new(1, d).with_factor(c).with_seed(seed);
            probsparse_attention(&q, &k, &v, &spec)
        }
    })?;
    let wall_clock_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(CostReport {
        mode,
        l,
        dot_products: probe::dot_products(),
        stack_activation_lengths: Vec::new(),
        decoder_forwards: probe::decoder_forwards(),
        wall_clock_ms,
    })
}

/// Exact per-stack sums of the time lengths entering each attention
/// layer.
pub fn memory_accounting(
    stacks: &[StackSpec],
    l: usize,
    distilling: bool,
) -> Result<Vec<Vec<usize>>> {
    stacks
        .iter()
        .map(|s| s.activation_lengths(l, distilling))
        .collect()
}

/// Ranking agreement between the exact sparsity measurement and its
/// max-mean surrogate, in the self-attention setting (queries are the
/// Gaussian key rows themselves). Within the top decile of queries by
/// exact measurement, count ordered pairs that satisfy the surrogate
/// premise (max-mean larger AND score variance larger) and check whether
/// the exact measurement orders them the same way.
#[allow(clippy::needless_range_loop)]
pub fn prop1_agreement(l_k: usize, d: usize, trials: usize, seed: u64) -> Result<f64> {
    if trials < 100 {
        return Err(Error::Config(format!(
            "prop1_agreement needs at least 100 trials, got {trials}"
        )));
    }
    if l_k < 20 {
        return Err(Error::Config("prop1_agreement needs L_K >= 20".into()));
    }
    let mut rng = Rng::seeded(seed);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut agree = 0u64;
    let mut total = 0u64;
    for _ in 0..trials {
        let keys: Vec<f64> = (0..l_k * d).map(|_| rng.standard_normal()).collect();
        // score rows of the self-attention matrix
        let mut exact = vec![0.0f64; l_k];
        let mut max_mean = vec![0.0f64; l_k];
        let mut variance = vec![0.0f64; l_k];
        let mut row = vec![0.0f64; l_k];
        for i in 0..l_k {
            for (j, r) in row.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += keys[i * d + c] * keys[j * d + c];
                }
                *r = dot * inv_sqrt_d;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = row.iter().sum::<f64>() / l_k as f64;
            let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            exact[i] = lse - mean;
            max_mean[i] = max - mean;
            variance[i] = row.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / l_k as f64;
        }
        // top decile of queries by the exact measurement
        let mut order: Vec<usize> = (0..l_k).collect();
        order.sort_by(|&a, &b| exact[b].partial_cmp(&exact[a]).unwrap().then(a.cmp(&b)));
        let decile = (l_k / 10).max(2);
        let top = &order[..decile];
        for ai in 0..top.len() {
            for bi in ai + 1..top.len() {
                let (mut a, mut b) = (top[ai], top[bi]);
                if max_mean[a] == max_mean[b] || exact[a] == exact[b] {
                    continue; // degenerate pair, trivially ordered
                }
                if max_mean[a] < max_mean[b] {
                    std::mem::swap(&mut a, &mut b);
                }
                if variance[a] <= variance[b] {
                    continue; // premise not satisfied
                }
                total += 1;
                if exact[a] > exact[b] {
                    agree += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Numeric("prop1_agreement: no qualifying pairs".into()));
    }
    Ok(agree as f64 / total as f64)
}

/// Average cumulative attention mass by sorted score rank: entry `r` is
/// the mass captured by the top `r + 1` ranked weights of a row,
/// averaged over rows.
pub fn mass_curve(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Err(Error::Dim("mass_curve: no rows".into()));
    };
    let n = first.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dim("mass_curve: ragged rows".into()));
    }
    let mut curve = vec![0.0f64; n];
    for row in rows {
        let total: f64 = row.iter().sum();
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut acc = 0.0;
        for (r, w) in sorted.iter().enumerate() {
            acc += w / total;
            curve[r] += acc;
        }
    }
    for v in curve.iter_mut() {
        *v /= rows.len() as f64;
    }
    Ok(curve)
}

/// Softmax rows of the first encoder attention layer for one window:
/// full attention probabilities per head, flattened into one row list.
pub fn first_layer_attention_rows<S: Scalar>(
    model: &Model<S>,
    sample: &WindowSample<S>,
) -> Result<Vec<Vec<f64>>> {
    no_grad(|| {
        let feed = crate::embedding::embed_input(
            &sample.enc_x,
            &sample.enc_stamps,
            &model.enc_embedding(),
        )?;
        let block = &model.encoder.stacks[0].blocks[0];
        let spec = &block.attn;
        let q = feed.matmul(&block.mha.wq)?.add_bias_row(&block.mha.bq)?;
        let k = feed.matmul(&block.mha.wk)?.add_bias_row(&block.mha.bk)?;
        let mut rows = Vec::new();
        let dh = spec.head_dim;
        for h in 0..spec.heads {
            let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
            let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
            let scale = S::from_f64(1.0 / (dh as f64).sqrt());
            let weights = qh
                .matmul(&kh.transpose()?)?
                .scale(scale)
                .softmax_rows()?;
            let n = weights.cols();
            for r in 0..weights.rows() {
                rows.push(weights.data()[r * n..(r + 1) * n].iter().map(|v| v.as_f64()).collect());
            }
        }
        Ok(rows)
    })
}

/// Cumulative-mass curve of the first encoder attention layer on the
/// given window (the long-tail diagnostic).
pub fn longtail_histogram<S: Scalar>(
    model: &Model<S>,
    sample: &WindowSample<S>,
) -> Result<Vec<f64>> {
    mass_curve(&first_layer_attention_rows(model, sample)?)
}
