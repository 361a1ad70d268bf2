//! Forward operations and their backward closures.

use crate::error::{Error, Result};

use super::{check_same_shape, Rng, Scalar, Tensor};

/// Epsilon added to the variance inside `layernorm`.
pub(crate) const LN_EPS: f64 = 1e-5;

/// Time-axis padding for `conv1d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Pad with `p` zeros on each side; output length `L + 2p - k + 1`.
    Zero(usize),
    /// Same-length output, out-of-range taps read the edge sample.
    Replicate,
}

/// Elementwise activation selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    /// Tanh-approximated GELU.
    Gelu,
}

fn as_2d<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dim(format!(
            "{what}: expected a 2-D tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|parents, g| {
                let mut out = Vec::with_capacity(2);
                for p in parents {
                    out.push(p.requires_grad().then(|| g.to_vec()));
                }
                out
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|parents, g| {
                vec![
                    parents[0].requires_grad().then(|| g.to_vec()),
                    parents[1]
                        .requires_grad()
                        .then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|parents, g| {
                vec![
                    parents[0]
                        .requires_grad()
                        .then(|| g.iter().zip(parents[1].data()).map(|(&gv, &b)| gv * b).collect()),
                    parents[1]
                        .requires_grad()
                        .then(|| g.iter().zip(parents[0].data()).map(|(&gv, &a)| gv * a).collect()),
                ]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&v| -v).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.iter().map(|&v| -v).collect())]),
        )
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: S) -> Tensor<S> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    /// Broadcast a 1-D bias over every row of a 2-D tensor.
    pub fn add_bias_row(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "add_bias_row")?;
        if bias.shape() != [n] {
            return Err(Error::Dim(format!(
                "add_bias_row: bias shape {:?} does not match {n} columns",
                bias.shape()
            )));
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += b[c];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |parents, g| {
                let db = parents[1].requires_grad().then(|| {
                    let mut db = vec![S::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    db
                });
                vec![parents[0].requires_grad().then(|| g.to_vec()), db]
            }),
        ))
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = as_2d(self, "matmul lhs")?;
        let (k2, n) = as_2d(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul: inner dimensions {k} and {k2} disagree"
            )));
        }
        let mut data = vec![S::zero(); m * n];
        S::gemm(false, false, m, k, n, S::one(), self.data(), other.data(), S::zero(), &mut data);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |parents, g| {
                let da = parents[0].requires_grad().then(|| {
                    let mut da = vec![S::zero(); m * k];
                    // dA = g . B^T
                    S::gemm(false, true, m, n, k, S::one(), g, parents[1].data(), S::zero(), &mut da);
                    da
                });
                let db = parents[1].requires_grad().then(|| {
                    let mut db = vec![S::zero(); k * n];
                    // dB = A^T . g
                    S::gemm(true, false, k, m, n, S::one(), parents[0].data(), g, S::zero(), &mut db);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "transpose")?;
        let src = self.data();
        let mut data = vec![S::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dg = vec![S::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        dg[r * n + c] = g[c * m + r];
                    }
                }
                vec![Some(dg)]
            }),
        ))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "softmax_rows")?;
        let valid = vec![n; m];
        self.softmax_rows_limited(&valid)
    }

    /// Row-wise softmax over the first `valid[r]` entries of row `r`; the
    /// remaining entries are zero. This is the masked form: instead of
    /// materializing -inf scores, out-of-mask positions simply get no mass.
    pub fn softmax_rows_limited(&self, valid: &[usize]) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "softmax_rows")?;
        if valid.len() != m {
            return Err(Error::Dim(format!(
                "softmax_rows_limited: {} row limits for {m} rows",
                valid.len()
            )));
        }
        if let Some(&bad) = valid.iter().find(|&&v| v == 0 || v > n) {
            return Err(Error::Dim(format!(
                "softmax_rows_limited: row limit {bad} outside 1..={n}"
            )));
        }
        let src = self.data();
        let mut data = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..r * n + valid[r]];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[r * n + c] = e;
                sum += e;
            }
            for c in 0..valid[r] {
                data[r * n + c] = data[r * n + c] / sum;
            }
        }
        let y = data.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                // dx = y * (g - sum(g * y)) per row; y is zero off-mask, so
                // the same expression covers the limited form.
                let mut dx = vec![S::zero(); m * n];
                for r in 0..m {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let mut dot = S::zero();
                    for (yv, gv) in ys.iter().zip(gs) {
                        dot += *yv * *gv;
                    }
                    for c in 0..n {
                        dx[r * n + c] = ys[c] * (gs[c] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let total = self.data().iter().fold(S::zero(), |a, &b| a + b);
        let n = self.len();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.len();
        let inv = S::one() / S::from_usize(n);
        let total = self.data().iter().fold(S::zero(), |a, &b| a + b) * inv;
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    /// Mean over rows of a 2-D tensor, producing a `[1, n]` tensor.
    pub fn mean_rows(&self) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "mean_rows")?;
        let inv = S::one() / S::from_usize(m);
        let src = self.data();
        let mut data = vec![S::zero(); n];
        for r in 0..m {
            for c in 0..n {
                data[c] += src[r * n + c];
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        Ok(Tensor::from_op(
            vec![1, n],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g[c] * inv;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Repeat a `[1, n]` row `m` times.
    pub fn repeat_row(&self, m: usize) -> Result<Tensor<S>> {
        let (one, n) = as_2d(self, "repeat_row")?;
        if one != 1 {
            return Err(Error::Dim(format!(
                "repeat_row: expected a single row, got {one}"
            )));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(src);
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        dx[c] += g[r * n + c];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Inclusive running mean over rows: row `i` of the output is the mean
    /// of input rows `0..=i`.
    pub fn cummean_rows(&self) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "cummean_rows")?;
        let src = self.data();
        let mut data = vec![S::zero(); m * n];
        let mut acc = vec![S::zero(); n];
        for r in 0..m {
            for c in 0..n {
                acc[c] += src[r * n + c];
                data[r * n + c] = acc[c] / S::from_usize(r + 1);
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                // dx_j = sum_{i >= j} g_i / (i + 1), via a reverse scan.
                let mut dx = vec![S::zero(); m * n];
                let mut acc = vec![S::zero(); n];
                for r in (0..m).rev() {
                    let inv = S::one() / S::from_usize(r + 1);
                    for c in 0..n {
                        acc[c] += g[r * n + c] * inv;
                        dx[r * n + c] = acc[c];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Contiguous row slice `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::Dim(format!(
                "slice_rows: range {start}..{end} invalid for {m} rows"
            )));
        }
        let data = self.data()[start * n..end * n].to_vec();
        Ok(Tensor::from_op(
            vec![end - start, n],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); m * n];
                dx[start * n..end * n].copy_from_slice(g);
                vec![Some(dx)]
            }),
        ))
    }

    /// Gather rows of a 2-D tensor by index (embedding-style lookup).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Dim(format!(
                "gather_rows: index {bad} out of range for {m} rows"
            )));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len(), n],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        dx[i * n + c] += g[r * n + c];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Overwrite the rows of `self` named by `indices` with the rows of
    /// `rows` (row `r` of `rows` lands at `indices[r]`).
    pub fn merge_rows(&self, rows: &Tensor<S>, indices: &[usize]) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "merge_rows base")?;
        let (u, n2) = as_2d(rows, "merge_rows rows")?;
        if n != n2 || u != indices.len() {
            return Err(Error::Dim(format!(
                "merge_rows: rows {u}x{n2} with {} indices onto base {m}x{n}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Dim(format!(
                "merge_rows: index {bad} out of range for {m} rows"
            )));
        }
        let mut data = self.data().to_vec();
        let rsrc = rows.data();
        for (r, &i) in indices.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&rsrc[r * n..(r + 1) * n]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), rows.clone()],
            Box::new(move |parents, g| {
                let dbase = parents[0].requires_grad().then(|| {
                    let mut d = g.to_vec();
                    for &i in &idx {
                        for c in 0..n {
                            d[i * n + c] = S::zero();
                        }
                    }
                    d
                });
                let drows = parents[1].requires_grad().then(|| {
                    let mut d = vec![S::zero(); idx.len() * n];
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * n..(r + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
                    }
                    d
                });
                vec![dbase, drows]
            }),
        ))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows: no inputs".into()));
        }
        let (_, n) = as_2d(parts[0], "concat_rows")?;
        let mut rows = 0usize;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let (m, nc) = as_2d(p, "concat_rows")?;
            if nc != n {
                return Err(Error::Dim(format!(
                    "concat_rows: column counts {n} and {nc} differ"
                )));
            }
            rows += m;
            sizes.push(m * n);
        }
        let mut data = Vec::with_capacity(rows * n);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(
            vec![rows, n],
            data,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |parents, g| {
                let mut out = Vec::with_capacity(parents.len());
                let mut off = 0;
                for (p, &sz) in parents.iter().zip(&sizes) {
                    out.push(p.requires_grad().then(|| g[off..off + sz].to_vec()));
                    off += sz;
                }
                out
            }),
        ))
    }

    /// Contiguous column slice `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::Dim(format!(
                "slice_cols: range {start}..{end} invalid for {n} columns"
            )));
        }
        let w = end - start;
        let src = self.data();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(Tensor::from_op(
            vec![m, w],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Stack 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols: no inputs".into()));
        }
        let (m, _) = as_2d(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (mr, w) = as_2d(p, "concat_cols")?;
            if mr != m {
                return Err(Error::Dim(format!(
                    "concat_cols: row counts {m} and {mr} differ"
                )));
            }
            widths.push(w);
            total += w;
        }
        let mut data = vec![S::zero(); m * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.data();
            for r in 0..m {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(Tensor::from_op(
            vec![m, total],
            data,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |parents, g| {
                let mut out = Vec::with_capacity(parents.len());
                let mut off = 0;
                for (p, &w) in parents.iter().zip(&widths) {
                    out.push(p.requires_grad().then(|| {
                        let mut d = vec![S::zero(); m * w];
                        for r in 0..m {
                            d[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        d
                    }));
                    off += w;
                }
                out
            }),
        ))
    }

    /// Elementwise activation of the selected kind.
    pub fn activation(&self, kind: Activation) -> Tensor<S> {
        match kind {
            Activation::Elu => self.elu(),
            Activation::Gelu => self.gelu(),
        }
    }

    /// ELU activation: `x` for positive inputs, `exp(x) - 1` otherwise.
    pub fn elu(&self) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { v.exp() - S::one() })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|parents, g| {
                let dx = parents[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > S::zero() { gv } else { gv * x.exp() })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Tensor<S> {
        let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (S::one() + u.tanh())
            })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |parents, g| {
                let three = S::from_f64(3.0);
                let dx = parents[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let u = c * (x + a * x * x * x);
                        let t = u.tanh();
                        let du = c * (S::one() + three * a * x * x);
                        gv * (half * (S::one() + t) + half * x * (S::one() - t * t) * du)
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Last-axis layer normalization with affine parameters.
    pub fn layernorm(&self, gain: &Tensor<S>, offset: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = as_2d(self, "layernorm")?;
        if gain.shape() != [n] || offset.shape() != [n] {
            return Err(Error::Dim(format!(
                "layernorm: gain {:?} / offset {:?} do not match width {n}",
                gain.shape(),
                offset.shape()
            )));
        }
        let eps = S::from_f64(LN_EPS);
        let inv_n = S::one() / S::from_usize(n);
        let src = self.data();
        let gd = gain.data();
        let od = offset.data();
        let mut data = vec![S::zero(); m * n];
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().fold(S::zero(), |a, &b| a + b) * inv_n;
            let var = row
                .iter()
                .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
                * inv_n;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                xhat[r * n + c] = xh;
                data[r * n + c] = gd[c] * xh + od[c];
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), gain.clone(), offset.clone()],
            Box::new(move |parents, g| {
                let gd = parents[1].data();
                let dgain = parents[1].requires_grad().then(|| {
                    let mut d = vec![S::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    d
                });
                let doffset = parents[2].requires_grad().then(|| {
                    let mut d = vec![S::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += g[r * n + c];
                        }
                    }
                    d
                });
                let dx = parents[0].requires_grad().then(|| {
                    let mut dx = vec![S::zero(); m * n];
                    for r in 0..m {
                        let mut mean_gy = S::zero();
                        let mut mean_gy_xh = S::zero();
                        for c in 0..n {
                            let gy = g[r * n + c] * gd[c];
                            mean_gy += gy;
                            mean_gy_xh += gy * xhat[r * n + c];
                        }
                        mean_gy *= inv_n;
                        mean_gy_xh *= inv_n;
                        for c in 0..n {
                            let gy = g[r * n + c] * gd[c];
                            dx[r * n + c] =
                                inv_std[r] * (gy - mean_gy - xhat[r * n + c] * mean_gy_xh);
                        }
                    }
                    dx
                });
                vec![dx, dgain, doffset]
            }),
        ))
    }

    /// 1-D convolution along the time axis. `self` is `[L, d_in]`, the
    /// kernel is `[k, d_in, d_out]` with odd width `k`.
    pub fn conv1d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        padding: Padding,
    ) -> Result<Tensor<S>> {
        let (l, d_in) = as_2d(self, "conv1d input")?;
        if weight.shape().len() != 3 {
            return Err(Error::Dim(format!(
                "conv1d: kernel must be [k, d_in, d_out], got {:?}",
                weight.shape()
            )));
        }
        let (k, wd_in, d_out) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Dim(format!("conv1d: kernel width {k} must be odd")));
        }
        if wd_in != d_in {
            return Err(Error::Dim(format!(
                "conv1d: kernel expects {wd_in} input channels, input has {d_in}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(Error::Dim(format!(
                    "conv1d: bias shape {:?} does not match {d_out} output channels",
                    b.shape()
                )));
            }
        }
        let (pad, out_len) = match padding {
            Padding::Zero(p) => {
                if l + 2 * p < k {
                    return Err(Error::Dim(format!(
                        "conv1d: kernel width {k} wider than padded input {}",
                        l + 2 * p
                    )));
                }
                (p, l + 2 * p - k + 1)
            }
            Padding::Replicate => ((k - 1) / 2, l),
        };

        // im2col: each output step gathers its k*d_in receptive field, then
        // one gemm against the [k*d_in, d_out] kernel matrix.
        let src = self.data();
        let kd = k * d_in;
        let mut cols = vec![S::zero(); out_len * kd];
        for t in 0..out_len {
            for tap in 0..k {
                let at = t as isize + tap as isize - pad as isize;
                let at = match padding {
                    Padding::Zero(_) => {
                        if at < 0 || at >= l as isize {
                            continue;
                        }
                        at as usize
                    }
                    Padding::Replicate => at.clamp(0, l as isize - 1) as usize,
                };
                cols[t * kd + tap * d_in..t * kd + (tap + 1) * d_in]
                    .copy_from_slice(&src[at * d_in..(at + 1) * d_in]);
            }
        }
        let mut data = vec![S::zero(); out_len * d_out];
        S::gemm(false, false, out_len, kd, d_out, S::one(), &cols, weight.data(), S::zero(), &mut data);
        if let Some(b) = bias {
            let bd = b.data();
            for t in 0..out_len {
                for o in 0..d_out {
                    data[t * d_out + o] += bd[o];
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![out_len, d_out],
            data,
            parents,
            Box::new(move |parents, g| {
                let weight = &parents[1];
                let dw = weight.requires_grad().then(|| {
                    let mut dw = vec![S::zero(); kd * d_out];
                    // dW = cols^T . g
                    S::gemm(true, false, kd, out_len, d_out, S::one(), &cols, g, S::zero(), &mut dw);
                    dw
                });
                let dx = parents[0].requires_grad().then(|| {
                    let mut dcols = vec![S::zero(); out_len * kd];
                    // dcols = g . W^T
                    S::gemm(
                        false,
                        true,
                        out_len,
                        d_out,
                        kd,
                        S::one(),
                        g,
                        weight.data(),
                        S::zero(),
                        &mut dcols,
                    );
                    let mut dx = vec![S::zero(); l * d_in];
                    for t in 0..out_len {
                        for tap in 0..k {
                            let at = t as isize + tap as isize - pad as isize;
                            let at = match padding {
                                Padding::Zero(_) => {
                                    if at < 0 || at >= l as isize {
                                        continue;
                                    }
                                    at as usize
                                }
                                Padding::Replicate => at.clamp(0, l as isize - 1) as usize,
                            };
                            for c in 0..d_in {
                                dx[at * d_in + c] += dcols[t * kd + tap * d_in + c];
                            }
                        }
                    }
                    dx
                });
                let mut out = vec![dx, dw];
                if parents.len() == 3 {
                    out.push(parents[2].requires_grad().then(|| {
                        let mut db = vec![S::zero(); d_out];
                        for t in 0..out_len {
                            for o in 0..d_out {
                                db[o] += g[t * d_out + o];
                            }
                        }
                        db
                    }));
                }
                out
            }),
        ))
    }

    /// Per-channel max pooling along the time axis with a -inf padding
    /// sentinel. Output length `(L + 2p - kernel)/stride + 1`.
    pub fn maxpool1d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<S>> {
        let (l, d) = as_2d(self, "maxpool1d")?;
        if kernel == 0 || stride == 0 {
            return Err(Error::Dim("maxpool1d: kernel and stride must be >= 1".into()));
        }
        if 2 * padding >= kernel {
            return Err(Error::Dim(format!(
                "maxpool1d: padding {padding} too large for kernel {kernel}"
            )));
        }
        if l + 2 * padding < kernel {
            return Err(Error::Dim(format!(
                "maxpool1d: kernel {kernel} wider than padded input {}",
                l + 2 * padding
            )));
        }
        let out_len = (l + 2 * padding - kernel) / stride + 1;
        let src = self.data();
        let mut data = vec![S::zero(); out_len * d];
        let mut argmax = vec![0usize; out_len * d];
        for t in 0..out_len {
            let start = t as isize * stride as isize - padding as isize;
            for c in 0..d {
                let mut best = S::neg_infinity();
                let mut best_at = 0usize;
                for tap in 0..kernel {
                    let at = start + tap as isize;
                    if at < 0 || at >= l as isize {
                        continue;
                    }
                    let v = src[at as usize * d + c];
                    if v > best {
                        best = v;
                        best_at = at as usize;
                    }
                }
                data[t * d + c] = best;
                argmax[t * d + c] = best_at;
            }
        }
        Ok(Tensor::from_op(
            vec![out_len, d],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); l * d];
                for t in 0..out_len {
                    for c in 0..d {
                        dx[argmax[t * d + c] * d + c] += g[t * d + c];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Inverted dropout. Evaluation mode (or `p == 0`) returns the input
    /// unchanged, bit for bit.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut Rng) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.len())
            .map(|_| {
                if rng.unit() < p {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                vec![Some(g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check, GradCheck};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn randt(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.standard_normal()).collect();
        Tensor::param(shape, data).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    /// FD-checks the gradient of `sum(weights . op(x))` for random weights.
    fn grad_check_op<F>(shapes: &[&[usize]], op: F)
    where
        F: Fn(&[Tensor<f64>]) -> crate::Result<Tensor<f64>>,
    {
        let mut rng = Rng::seeded(99);
        let params: Vec<(String, Tensor<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("p{i}"), randt(s, &mut rng)))
            .collect();
        let out_probe = op(&params.iter().map(|(_, p)| p.clone()).collect::<Vec<_>>()).unwrap();
        let weights = randt(out_probe.shape(), &mut rng).detach();
        let report = check(GradCheck::default(), &params, |ps| {
            let xs: Vec<Tensor<f64>> = ps.iter().map(|(_, p)| p.clone()).collect();
            Ok(op(&xs)?.mul(&weights)?.sum_all())
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "gradient mismatch: {:?} (max rel err {})",
            report.worst,
            report.max_rel_err
        );
    }

    #[test]
    fn matmul_identity_and_hand_oracle() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = Tensor::<f64>::eye(2);
        assert_eq!(a.matmul(&id).unwrap().data(), a.data());

        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);

        let z = Tensor::<f64>::zeros(&[2, 3]);
        let any = t(&[3, 2], &[5.0, -1.0, 2.0, 0.5, 9.0, 4.0]);
        assert!(z.matmul(&any).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(a.matmul(&b), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_examples() {
        let x = t(&[1, 2], &[1.0, 1.0]);
        assert_close(x.softmax_rows().unwrap().data(), &[0.5, 0.5], 1e-15);

        let x = t(&[1, 2], &[0.0, 3.0f64.ln()]);
        assert_close(x.softmax_rows().unwrap().data(), &[0.25, 0.75], 1e-15);

        let x = t(&[1, 2], &[1000.0, 1000.0]);
        let y = x.softmax_rows().unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert_close(y.data(), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitudes() {
        let mut rng = Rng::seeded(5);
        for _ in 0..50 {
            let data: Vec<f64> = (0..8 * 16).map(|_| rng.uniform(-1e3, 1e3)).collect();
            let x = t(&[8, 16], &data);
            let y = x.softmax_rows().unwrap();
            for r in 0..8 {
                let sum: f64 = y.data()[r * 16..(r + 1) * 16].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            }
        }
    }

    #[test]
    fn conv1d_examples() {
        // identity kernel passes the input through
        let x = t(&[4, 1], &[1.0, -2.0, 3.0, 0.5]);
        let w = t(&[3, 1, 1], &[0.0, 1.0, 0.0]);
        let y = x.conv1d(&w, None, Padding::Replicate).unwrap();
        assert_eq!(y.data(), x.data());

        // hand-computed zero-padded convolution
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let w = t(&[3, 1, 1], &[1.0, 1.0, 1.0]);
        let y = x.conv1d(&w, None, Padding::Zero(1)).unwrap();
        assert_close(y.data(), &[3.0, 6.0, 5.0], 1e-15);

        // zero input broadcasts the bias everywhere
        let x = Tensor::<f64>::zeros(&[5, 2]);
        let w = t(&[3, 2, 2], &[0.25; 12]);
        let b = t(&[2], &[7.0, -3.0]);
        let y = x.conv1d(&w, Some(&b), Padding::Replicate).unwrap();
        for r in 0..5 {
            assert_eq!(y.at(r, 0), 7.0);
            assert_eq!(y.at(r, 1), -3.0);
        }
    }

    #[test]
    fn conv1d_kernel_wider_than_padded_input() {
        let x = t(&[1, 1], &[1.0]);
        let w = t(&[5, 1, 1], &[1.0; 5]);
        assert!(matches!(
            x.conv1d(&w, None, Padding::Zero(1)),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn maxpool_examples() {
        let x = t(&[4, 1], &[1.0, 3.0, 2.0, 5.0]);
        let y = x.maxpool1d(2, 2, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);

        let c = Tensor::<f64>::full(&[6, 3], 2.5);
        let y = c.maxpool1d(3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.5));

        let x = t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.maxpool1d(3, 2, 1).unwrap().shape(), &[2, 1]);
    }

    #[test]
    fn pool_and_conv_length_laws() {
        // distill configuration: conv same-pad keeps L, pool (3, 2, 1) halves
        for l in 1..=512usize {
            let x = Tensor::<f64>::zeros(&[l, 1]);
            let w = t(&[3, 1, 1], &[1.0, 1.0, 1.0]);
            assert_eq!(x.conv1d(&w, None, Padding::Replicate).unwrap().rows(), l);
            assert_eq!(x.maxpool1d(3, 2, 1).unwrap().rows(), l.div_ceil(2));
        }
    }

    #[test]
    fn activation_examples() {
        let x = t(&[1, 3], &[0.0, -20.0, 2.0]);
        let elu = x.elu();
        assert_eq!(elu.data()[0], 0.0);
        assert!((elu.data()[1] - (-1.0)).abs() < 1e-8);
        assert_eq!(elu.data()[2], 2.0);
        let gelu = x.gelu();
        assert_eq!(gelu.data()[0], 0.0);
    }

    #[test]
    fn layernorm_examples() {
        let gain = t(&[3], &[1.0, 1.0, 1.0]);
        let offset = t(&[3], &[0.0, 0.0, 0.0]);
        let c = Tensor::<f64>::full(&[2, 3], 4.2);
        let y = c.layernorm(&gain, &offset).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "zero-variance guard");

        let gain2 = t(&[2], &[1.0, 1.0]);
        let offset2 = t(&[2], &[0.0, 0.0]);
        let x = t(&[1, 2], &[1.0, 3.0]);
        let y = x.layernorm(&gain2, &offset2).unwrap();
        assert_close(y.data(), &[-1.0, 1.0], 1e-5);
    }

    #[test]
    fn layernorm_statistical_oracle() {
        // wide-scale rows so the variance epsilon is negligible
        let mut rng = Rng::seeded(11);
        let d = 64;
        let data: Vec<f64> = (0..32 * d).map(|_| rng.uniform(-20.0, 20.0)).collect();
        let x = t(&[32, d], &data);
        let gain = t(&[d], &vec![1.0; d]);
        let offset = t(&[d], &vec![0.0; d]);
        let y = x.layernorm(&gain, &offset).unwrap();
        for r in 0..32 {
            let row = &y.data()[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-6, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn dropout_contracts() {
        let mut rng = Rng::seeded(1);
        let x = t(&[4, 4], &(0..16).map(|i| i as f64).collect::<Vec<_>>());
        // p = 0 and eval mode are bit-identical to the input
        let y = x.dropout(0.0, true, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        let y = x.dropout(0.1, false, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(x.dropout(1.0, true, &mut rng).is_err());

        // Monte Carlo survivor fraction at p = 0.5
        let big = Tensor::<f64>::full(&[100, 100], 1.0);
        let y = big.dropout(0.5, true, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 1e4;
        assert!((frac - 0.5).abs() < 0.05, "survivor fraction {frac}");
        // survivors are scaled by 1/(1-p)
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_contracts() {
        // backward on a non-scalar is a contract error
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));

        // loss independent of a parameter leaves its grad empty (zero)
        let p = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = t(&[1, 2], &[3.0, 4.0]).sum_all();
        loss.backward().unwrap();
        assert!(p.grad().is_none());
    }

    #[test]
    fn grad_matmul_matches_finite_differences() {
        grad_check_op(&[&[3, 4], &[4, 2]], |xs| xs[0].matmul(&xs[1]));
    }

    #[test]
    fn grad_elementwise_ops() {
        grad_check_op(&[&[3, 3], &[3, 3]], |xs| xs[0].add(&xs[1]));
        grad_check_op(&[&[3, 3], &[3, 3]], |xs| xs[0].sub(&xs[1]));
        grad_check_op(&[&[3, 3], &[3, 3]], |xs| xs[0].mul(&xs[1]));
        grad_check_op(&[&[2, 5]], |xs| Ok(xs[0].neg()));
        grad_check_op(&[&[2, 5]], |xs| Ok(xs[0].scale(1.7)));
        grad_check_op(&[&[2, 5]], |xs| Ok(xs[0].elu()));
        grad_check_op(&[&[2, 5]], |xs| Ok(xs[0].gelu()));
    }

    #[test]
    fn grad_structural_ops() {
        grad_check_op(&[&[4, 3], &[3]], |xs| xs[0].add_bias_row(&xs[1]));
        grad_check_op(&[&[4, 3]], |xs| xs[0].transpose());
        grad_check_op(&[&[5, 3]], |xs| xs[0].slice_rows(1, 4));
        grad_check_op(&[&[3, 6]], |xs| xs[0].slice_cols(2, 5));
        grad_check_op(&[&[2, 3], &[4, 3]], |xs| {
            Tensor::concat_rows(&[&xs[0], &xs[1]])
        });
        grad_check_op(&[&[3, 2], &[3, 4]], |xs| {
            Tensor::concat_cols(&[&xs[0], &xs[1]])
        });
        grad_check_op(&[&[5, 3]], |xs| xs[0].gather_rows(&[0, 2, 2, 4]));
        grad_check_op(&[&[5, 3], &[2, 3]], |xs| xs[0].merge_rows(&xs[1], &[1, 3]));
        grad_check_op(&[&[4, 3]], |xs| xs[0].mean_rows());
        grad_check_op(&[&[1, 3]], |xs| xs[0].repeat_row(5));
        grad_check_op(&[&[4, 3]], |xs| xs[0].cummean_rows());
        grad_check_op(&[&[4, 3]], |xs| Ok(xs[0].sum_all()));
        grad_check_op(&[&[4, 3]], |xs| Ok(xs[0].mean_all()));
    }

    #[test]
    fn grad_softmax_and_layernorm() {
        grad_check_op(&[&[4, 6]], |xs| xs[0].softmax_rows());
        grad_check_op(&[&[4, 6]], |xs| xs[0].softmax_rows_limited(&[1, 3, 4, 6]));
        grad_check_op(&[&[4, 6], &[6], &[6]], |xs| {
            xs[0].layernorm(&xs[1], &xs[2])
        });
    }

    #[test]
    fn grad_conv_and_pool() {
        grad_check_op(&[&[6, 2], &[3, 2, 4], &[4]], |xs| {
            xs[0].conv1d(&xs[1], Some(&xs[2]), Padding::Replicate)
        });
        grad_check_op(&[&[6, 2], &[3, 2, 4]], |xs| {
            xs[0].conv1d(&xs[1], None, Padding::Zero(1))
        });
        grad_check_op(&[&[7, 3]], |xs| xs[0].maxpool1d(3, 2, 1));
    }

    #[test]
    fn grad_dropout() {
        // fixed seed so forward and FD re-runs see the same mask
        grad_check_op(&[&[4, 4]], |xs| {
            let mut rng = Rng::seeded(42);
            xs[0].dropout(0.4, true, &mut rng)
        });
    }

    #[test]
    fn from_vec_validation() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2], vec![f64::NAN, 0.0]).is_err());
        assert!(Tensor::<f64>::from_vec(&[0], vec![]).is_err());
    }
}
