//! Forward operations and the backward rules they record.
//!
//! Matrix products run through the GEMM kernel with transposes expressed as
//! stride swaps; everything else is plain loops. A weight-shaped (2-D) operand
//! against a batched (3-D) one broadcasts by flattening the batched side into
//! one tall matrix, so the whole batch is a single GEMM call.

use super::gemm::{gemm_into, Element};
use super::{Rule, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// (batch, rows, cols) of a tensor used as a (stack of) matrices.
fn mat_dims<T: Element>(t: &Tensor<T>) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [n, k] => Some((1, n, k)),
        [b, n, k] => Some((b, n, k)),
        _ => None,
    }
}

fn dim_err<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// How an elementwise rhs lines up against the lhs shape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// rhs is a single value.
    Scalar,
    /// rhs is one row, repeated over every row of the lhs.
    Row,
    /// lhs [b,n,c], rhs [b,1,c]: one row per batch slice.
    PerBatchRow,
    /// lhs [b,n,c], rhs [n,c]: one matrix repeated over the batch.
    PerSlice,
}

fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        return Some(Broadcast::Same);
    }
    if rhs == [1] {
        return Some(Broadcast::Scalar);
    }
    let cols = *lhs.last()?;
    if rhs == [cols] {
        return Some(Broadcast::Row);
    }
    if let ([b, _, c], [rb, 1, rc]) = (lhs, rhs) {
        if rb == b && rc == c {
            return Some(Broadcast::PerBatchRow);
        }
    }
    if let ([_, n, c], [rn, rc]) = (lhs, rhs) {
        if rn == n && rc == c {
            return Some(Broadcast::PerSlice);
        }
    }
    None
}

/// Applies `f(out[i], rhs_value_for_i)` under the given broadcast layout.
fn for_each_broadcast<T: Element>(
    out: &mut [T],
    rhs: &[T],
    lhs_shape: &[usize],
    kind: Broadcast,
    f: impl Fn(&mut T, T),
) {
    match kind {
        Broadcast::Same => {
            for (o, r) in out.iter_mut().zip(rhs) {
                f(o, *r);
            }
        }
        Broadcast::Scalar => {
            let r = rhs[0];
            for o in out.iter_mut() {
                f(o, r);
            }
        }
        Broadcast::Row => {
            let c = *lhs_shape.last().unwrap();
            for (i, o) in out.iter_mut().enumerate() {
                f(o, rhs[i % c]);
            }
        }
        Broadcast::PerBatchRow => {
            let (b, n, c) = (lhs_shape[0], lhs_shape[1], lhs_shape[2]);
            for bi in 0..b {
                let row = &rhs[bi * c..(bi + 1) * c];
                let slice = &mut out[bi * n * c..(bi + 1) * n * c];
                for (i, o) in slice.iter_mut().enumerate() {
                    f(o, row[i % c]);
                }
            }
        }
        Broadcast::PerSlice => {
            let (b, n, c) = (lhs_shape[0], lhs_shape[1], lhs_shape[2]);
            let len = n * c;
            for bi in 0..b {
                let slice = &mut out[bi * len..(bi + 1) * len];
                for (i, o) in slice.iter_mut().enumerate() {
                    f(o, rhs[i]);
                }
            }
        }
    }
}

/// Sums `vals` (lhs-shaped) down to the rhs shape of the given broadcast.
fn reduce_broadcast<T: Element>(
    vals: &[T],
    lhs_shape: &[usize],
    rhs_len: usize,
    kind: Broadcast,
) -> Vec<T> {
    let mut out = vec![T::zero(); rhs_len];
    match kind {
        Broadcast::Same => out.copy_from_slice(vals),
        Broadcast::Scalar => {
            out[0] = vals.iter().fold(T::zero(), |s, v| s + *v);
        }
        Broadcast::Row => {
            let c = *lhs_shape.last().unwrap();
            for (i, v) in vals.iter().enumerate() {
                out[i % c] = out[i % c] + *v;
            }
        }
        Broadcast::PerBatchRow => {
            let (b, n, c) = (lhs_shape[0], lhs_shape[1], lhs_shape[2]);
            for bi in 0..b {
                let slice = &vals[bi * n * c..(bi + 1) * n * c];
                for (i, v) in slice.iter().enumerate() {
                    out[bi * c + i % c] = out[bi * c + i % c] + *v;
                }
            }
        }
        Broadcast::PerSlice => {
            let (b, n, c) = (lhs_shape[0], lhs_shape[1], lhs_shape[2]);
            let len = n * c;
            for bi in 0..b {
                let slice = &vals[bi * len..(bi + 1) * len];
                for (i, v) in slice.iter().enumerate() {
                    out[i] = out[i] + *v;
                }
            }
        }
    }
    out
}

/// Column statistics of rows `lo..hi`: (mean, population variance) per column.
fn column_stats<T: Element>(x: &[T], cols: usize, lo: usize, hi: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64((hi - lo) as f64);
    let mut mean = vec![T::zero(); cols];
    for r in lo..hi {
        for (j, m) in mean.iter_mut().enumerate() {
            *m = *m + x[r * cols + j];
        }
    }
    for m in mean.iter_mut() {
        *m = *m / count;
    }
    let mut var = vec![T::zero(); cols];
    for r in lo..hi {
        for (j, v) in var.iter_mut().enumerate() {
            let d = x[r * cols + j] - mean[j];
            *v = *v + d * d;
        }
    }
    for v in var.iter_mut() {
        *v = *v / count;
    }
    (mean, var)
}

impl<T: Element> Tensor<T> {
    /// Matrix product. A 2-D rhs broadcasts over a 3-D lhs (shared weights);
    /// two 3-D operands multiply slice by slice.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (ba, n, k) = mat_dims(self).ok_or_else(|| dim_err("matmul", self, rhs))?;
        let (bb, k2, p) = mat_dims(rhs).ok_or_else(|| dim_err("matmul", self, rhs))?;
        let lhs_batched = self.shape().len() == 3;
        let rhs_batched = rhs.shape().len() == 3;
        if k != k2 || (rhs_batched && (!lhs_batched || ba != bb)) {
            return Err(dim_err("matmul", self, rhs));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![T::zero(); ba * n * p];
        if !rhs_batched {
            // One tall GEMM over the flattened batch.
            gemm_into(ba * n, k, p, &a, false, &b, false, T::zero(), &mut out);
        } else {
            for i in 0..ba {
                gemm_into(
                    n,
                    k,
                    p,
                    &a[i * n * k..(i + 1) * n * k],
                    false,
                    &b[i * k * p..(i + 1) * k * p],
                    false,
                    T::zero(),
                    &mut out[i * n * p..(i + 1) * n * p],
                );
            }
        }
        drop(a);
        drop(b);
        let shape = if lhs_batched {
            vec![ba, n, p]
        } else {
            vec![n, p]
        };
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            Rule::Matmul,
        ))
    }

    /// A·Bᵀ over the last two extents; same broadcast rules as `matmul`.
    pub fn matmul_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (ba, n, k) = mat_dims(self).ok_or_else(|| dim_err("matmul_nt", self, rhs))?;
        let (bb, c, k2) = mat_dims(rhs).ok_or_else(|| dim_err("matmul_nt", self, rhs))?;
        let lhs_batched = self.shape().len() == 3;
        let rhs_batched = rhs.shape().len() == 3;
        if k != k2 || (rhs_batched && (!lhs_batched || ba != bb)) {
            return Err(dim_err("matmul_nt", self, rhs));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![T::zero(); ba * n * c];
        if !rhs_batched {
            gemm_into(ba * n, k, c, &a, false, &b, true, T::zero(), &mut out);
        } else {
            for i in 0..ba {
                gemm_into(
                    n,
                    k,
                    c,
                    &a[i * n * k..(i + 1) * n * k],
                    false,
                    &b[i * c * k..(i + 1) * c * k],
                    true,
                    T::zero(),
                    &mut out[i * n * c..(i + 1) * n * c],
                );
            }
        }
        drop(a);
        drop(b);
        let shape = if lhs_batched {
            vec![ba, n, c]
        } else {
            vec![n, c]
        };
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            Rule::MatmulNt,
        ))
    }

    /// Elementwise sum with broadcasting (`rhs` may be a scalar, a row, a
    /// per-batch row block, or a matrix repeated over the batch).
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let kind =
            broadcast_kind(self.shape(), rhs.shape()).ok_or_else(|| dim_err("add", self, rhs))?;
        let mut out = self.to_vec();
        for_each_broadcast(&mut out, &rhs.data(), self.shape(), kind, |o, r| {
            *o = *o + r
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Rule::Add,
        ))
    }

    /// Elementwise product; `rhs` a full tensor, a broadcast row, or a scalar.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let kind =
            broadcast_kind(self.shape(), rhs.shape()).ok_or_else(|| dim_err("mul", self, rhs))?;
        if matches!(kind, Broadcast::PerBatchRow | Broadcast::PerSlice) {
            return Err(dim_err("mul", self, rhs));
        }
        let mut out = self.to_vec();
        for_each_broadcast(&mut out, &rhs.data(), self.shape(), kind, |o, r| {
            *o = *o * r
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Rule::Mul,
        ))
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|v| *v * c).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Rule::Scale(c),
        )
    }

    /// max(0, x); the derivative at exactly 0 is taken as 0.
    pub fn relu(&self) -> Result<Tensor<T>> {
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Rule::Relu,
        ))
    }

    /// Row-wise softmax with max subtraction. −∞ entries get exactly 0 weight;
    /// a row of only −∞ has no distribution and is a numerical fault.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let cols = self.cols();
        if cols == 0 {
            return Err(Error::Contract("softmax_rows on zero-width rows".into()));
        }
        let data = self.data();
        let mut out = vec![T::zero(); data.len()];
        for r in 0..self.rows() {
            let row = &data[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            if max == T::neg_infinity() {
                return Err(Error::Numerical(format!(
                    "softmax row {r} is entirely -inf; no valid distribution"
                )));
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut sum = T::zero();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (*v - max).exp();
                sum = sum + *o;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Rule::SoftmaxRows,
        ))
    }

    /// Concatenates along the last extent; parts must agree on every other
    /// extent. Zero-width parts are legal no-ops.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero tensors".into()))?;
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            if &p.shape()[..p.shape().len() - 1] != lead {
                return Err(dim_err("concat_cols", first, p));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        let total: usize = widths.iter().sum();
        let rows = first.rows();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let d = p.data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::from_op(
            out,
            shape,
            parts.iter().map(|p| (*p).clone()).collect(),
            Rule::ConcatCols { widths },
        ))
    }

    /// The contiguous column window `start..start+width`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor<T>> {
        let cols = self.cols();
        if start + width > cols {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + width,
                bound: cols + 1,
            });
        }
        let data = self.data();
        let rows = self.rows();
        let mut out = vec![T::zero(); rows * width];
        for r in 0..rows {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&data[r * cols + start..r * cols + start + width]);
        }
        drop(data);
        let mut shape = self.shape()[..self.shape().len() - 1].to_vec();
        shape.push(width);
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Rule::SliceCols { start },
        ))
    }

    /// Row lookup into a 2-D table; backward scatter-adds per id.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows needs a 2-D table, got {:?}",
                self.shape()
            )));
        }
        let (v, m) = (self.shape()[0], self.shape()[1]);
        let data = self.data();
        let mut out = vec![T::zero(); ids.len() * m];
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out[i * m..(i + 1) * m].copy_from_slice(&data[id * m..(id + 1) * m]);
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), m],
            vec![self.clone()],
            Rule::GatherRows { ids: ids.to_vec() },
        ))
    }

    /// Same data, new extents (element count must match).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 3 || numel != self.len() {
            return Err(Error::Contract(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape,
            vec![self.clone()],
            Rule::Reshape,
        ))
    }

    /// Full reduction to a 1-element tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let total = self.data().iter().fold(T::zero(), |s, v| s + *v);
        Ok(Tensor::from_op(
            vec![total],
            vec![1],
            vec![self.clone()],
            Rule::Sum,
        ))
    }

    /// Standardizes each column to mean 0 / population variance 1 over the
    /// first `valid[b]` rows of each slice; rows past the valid count are
    /// zeroed and excluded from the statistics. `valid` has one entry per
    /// batch slice (one entry total for a 2-D input).
    pub fn standardize_cols(&self, valid: &[usize], eps: T) -> Result<Tensor<T>> {
        let (b, n, m) = mat_dims(self)
            .ok_or_else(|| Error::Contract(format!("standardize_cols on {:?}", self.shape())))?;
        check_valid_counts(valid, b, n)?;
        let data = self.data();
        let mut out = vec![T::zero(); data.len()];
        for bi in 0..b {
            let x = &data[bi * n * m..(bi + 1) * n * m];
            let o = &mut out[bi * n * m..(bi + 1) * n * m];
            let v = valid[bi];
            let (mean, var) = column_stats(x, m, 0, v);
            for j in 0..m {
                let s = (var[j] + eps).sqrt();
                for r in 0..v {
                    o[r * m + j] = (x[r * m + j] - mean[j]) / s;
                }
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Rule::StandardizeCols {
                valid: valid.to_vec(),
                eps,
            },
        ))
    }

    /// Column standardization where row i is normalized by the statistics of
    /// rows 0..=i only, so no output row depends on any later row. Row 0 is
    /// identically 0 (its own mean). Valid-row handling as `standardize_cols`.
    pub fn standardize_cols_causal(&self, valid: &[usize], eps: T) -> Result<Tensor<T>> {
        let (b, n, m) = mat_dims(self).ok_or_else(|| {
            Error::Contract(format!("standardize_cols_causal on {:?}", self.shape()))
        })?;
        check_valid_counts(valid, b, n)?;
        let data = self.data();
        let mut out = vec![T::zero(); data.len()];
        for bi in 0..b {
            let x = &data[bi * n * m..(bi + 1) * n * m];
            let o = &mut out[bi * n * m..(bi + 1) * n * m];
            let v = valid[bi];
            for j in 0..m {
                let mut sum = T::zero();
                let mut sumsq = T::zero();
                for r in 0..v {
                    let xv = x[r * m + j];
                    sum = sum + xv;
                    sumsq = sumsq + xv * xv;
                    let k = T::from_f64((r + 1) as f64);
                    let mean = sum / k;
                    let var = (sumsq / k - mean * mean).max(T::zero());
                    o[r * m + j] = (xv - mean) / (var + eps).sqrt();
                }
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Rule::StandardizeColsCausal {
                valid: valid.to_vec(),
                eps,
            },
        ))
    }

    /// Standardizes every row over the last extent (mean 0, population
    /// variance 1, ε-guarded).
    pub fn standardize_rows(&self, eps: T) -> Result<Tensor<T>> {
        let d = self.cols();
        if d == 0 {
            return Err(Error::Contract("standardize_rows on zero-width rows".into()));
        }
        let count = T::from_f64(d as f64);
        let data = self.data();
        let mut out = vec![T::zero(); data.len()];
        for r in 0..self.rows() {
            let row = &data[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, v| s + *v) / count;
            let var = row
                .iter()
                .fold(T::zero(), |s, v| s + (*v - mean) * (*v - mean))
                / count;
            let s = (var + eps).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (*v - mean) / s;
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Rule::StandardizeRows { eps },
        ))
    }

    /// Inverted dropout: each element is zeroed with probability `rate`,
    /// survivors are scaled by 1/(1−rate). `rate` 0 is the identity.
    pub fn dropout(&self, rate: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let boost = T::from_f64(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..self.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    boost
                }
            })
            .collect();
        let out: Vec<T> = self
            .data()
            .iter()
            .zip(&keep)
            .map(|(v, k)| *v * *k)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Rule::Dropout { keep },
        ))
    }

    /// True if any element is NaN or ±∞ (fault detection on losses/logits).
    pub fn has_non_finite(&self) -> bool {
        self.data().iter().any(|v| !v.is_finite())
    }
}

fn check_valid_counts(valid: &[usize], b: usize, n: usize) -> Result<()> {
    if valid.len() != b {
        return Err(Error::Contract(format!(
            "{} valid-row counts for {b} slices",
            valid.len()
        )));
    }
    for &v in valid {
        if v == 0 {
            return Err(Error::Input(
                "cannot standardize an empty (0-row) sequence".into(),
            ));
        }
        if v > n {
            return Err(Error::Contract(format!("valid rows {v} > sequence rows {n}")));
        }
    }
    Ok(())
}

/// Mean cross-entropy of `logits` rows against `labels`, skipping positions
/// whose label is `pad_id`: pad positions contribute nothing to the value or
/// the gradient. Rows may come from a flattened batch.
pub fn masked_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[u32],
    pad_id: u32,
) -> Result<Tensor<T>> {
    let v = logits.cols();
    let rows = logits.rows();
    if rows != labels.len() {
        return Err(Error::Contract(format!(
            "{} logit rows vs {} labels",
            rows,
            labels.len()
        )));
    }
    let n_valid = labels.iter().filter(|&&l| l != pad_id).count();
    if n_valid == 0 {
        return Err(Error::Input("all labels are padding; loss undefined".into()));
    }
    let data = logits.data();
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        if label == pad_id {
            continue;
        }
        if label as usize >= v {
            return Err(Error::Index {
                op: "masked_cross_entropy",
                index: label as usize,
                bound: v,
            });
        }
        let row = &data[r * v..(r + 1) * v];
        let max = row.iter().fold(T::neg_infinity(), |m, x| m.max(*x));
        let lse = max
            + row
                .iter()
                .fold(T::zero(), |s, x| s + (*x - max).exp())
                .ln();
        total = total + lse - row[label as usize];
    }
    drop(data);
    let loss = total / T::from_f64(n_valid as f64);
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Rule::MaskedCrossEntropy {
            labels: labels.to_vec(),
            pad_id,
            n_valid,
        },
    ))
}

/// Routes one node's output gradient to its parents according to its rule.
pub(crate) fn apply_backward<T: Element>(node: &Tensor<T>, grad: &[T]) {
    let rule = node.rule().expect("apply_backward on a leaf");
    let parents = node.parents();
    match rule {
        Rule::Matmul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (ba, n, k) = mat_dims(a).unwrap();
            let p = b.cols();
            if b.shape().len() == 2 {
                if a.requires_grad() {
                    let bd = b.data();
                    let mut ga = a.grad_buf();
                    gemm_into(ba * n, p, k, grad, false, &bd, true, T::one(), &mut ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut gb = b.grad_buf();
                    gemm_into(k, ba * n, p, &ad, true, grad, false, T::one(), &mut gb);
                }
            } else {
                for i in 0..ba {
                    let g = &grad[i * n * p..(i + 1) * n * p];
                    if a.requires_grad() {
                        let bd = b.data();
                        let mut ga = a.grad_buf();
                        gemm_into(
                            n,
                            p,
                            k,
                            g,
                            false,
                            &bd[i * k * p..(i + 1) * k * p],
                            true,
                            T::one(),
                            &mut ga[i * n * k..(i + 1) * n * k],
                        );
                    }
                    if b.requires_grad() {
                        let ad = a.data();
                        let mut gb = b.grad_buf();
                        gemm_into(
                            k,
                            n,
                            p,
                            &ad[i * n * k..(i + 1) * n * k],
                            true,
                            g,
                            false,
                            T::one(),
                            &mut gb[i * k * p..(i + 1) * k * p],
                        );
                    }
                }
            }
        }
        Rule::MatmulNt => {
            let (a, b) = (&parents[0], &parents[1]);
            let (ba, n, k) = mat_dims(a).unwrap();
            let (_, c, _) = mat_dims(b).unwrap();
            if b.shape().len() == 2 {
                if a.requires_grad() {
                    let bd = b.data();
                    let mut ga = a.grad_buf();
                    gemm_into(ba * n, c, k, grad, false, &bd, false, T::one(), &mut ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut gb = b.grad_buf();
                    gemm_into(c, ba * n, k, grad, true, &ad, false, T::one(), &mut gb);
                }
            } else {
                for i in 0..ba {
                    let g = &grad[i * n * c..(i + 1) * n * c];
                    if a.requires_grad() {
                        let bd = b.data();
                        let mut ga = a.grad_buf();
                        gemm_into(
                            n,
                            c,
                            k,
                            g,
                            false,
                            &bd[i * c * k..(i + 1) * c * k],
                            false,
                            T::one(),
                            &mut ga[i * n * k..(i + 1) * n * k],
                        );
                    }
                    if b.requires_grad() {
                        let ad = a.data();
                        let mut gb = b.grad_buf();
                        gemm_into(
                            c,
                            n,
                            k,
                            g,
                            true,
                            &ad[i * n * k..(i + 1) * n * k],
                            false,
                            T::one(),
                            &mut gb[i * c * k..(i + 1) * c * k],
                        );
                    }
                }
            }
        }
        Rule::Add => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                a.accumulate_grad(grad);
            }
            if b.requires_grad() {
                let kind = broadcast_kind(a.shape(), b.shape()).expect("validated in forward");
                let reduced = reduce_broadcast(grad, a.shape(), b.len(), kind);
                b.accumulate_grad(&reduced);
            }
        }
        Rule::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            let kind = broadcast_kind(a.shape(), b.shape()).expect("validated in forward");
            if a.requires_grad() {
                let mut da = grad.to_vec();
                for_each_broadcast(&mut da, &b.data(), a.shape(), kind, |o, r| *o = *o * r);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let prods: Vec<T> = grad.iter().zip(ad.iter()).map(|(g, x)| *g * *x).collect();
                drop(ad);
                let reduced = reduce_broadcast(&prods, a.shape(), b.len(), kind);
                b.accumulate_grad(&reduced);
            }
        }
        Rule::Scale(c) => {
            let p = &parents[0];
            if p.requires_grad() {
                let da: Vec<T> = grad.iter().map(|g| *g * *c).collect();
                p.accumulate_grad(&da);
            }
        }
        Rule::Relu => {
            let p = &parents[0];
            if p.requires_grad() {
                let pd = p.data();
                let da: Vec<T> = grad
                    .iter()
                    .zip(pd.iter())
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                drop(pd);
                p.accumulate_grad(&da);
            }
        }
        Rule::SoftmaxRows => {
            let p = &parents[0];
            if p.requires_grad() {
                let y = node.data();
                let cols = node.cols();
                let mut da = vec![T::zero(); y.len()];
                for r in 0..node.rows() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &grad[r * cols..(r + 1) * cols];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |s, (yv, gv)| s + *yv * *gv);
                    for ((d, yv), gv) in da[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *d = *yv * (*gv - dot);
                    }
                }
                drop(y);
                p.accumulate_grad(&da);
            }
        }
        Rule::ConcatCols { widths } => {
            let total: usize = widths.iter().sum();
            let rows = node.rows();
            let mut offset = 0;
            for (p, &w) in parents.iter().zip(widths) {
                if p.requires_grad() {
                    let mut dp = vec![T::zero(); rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += w;
            }
        }
        Rule::SliceCols { start } => {
            let p = &parents[0];
            if p.requires_grad() {
                let cols = p.cols();
                let w = node.cols();
                let rows = node.rows();
                let mut gp = p.grad_buf();
                for r in 0..rows {
                    for j in 0..w {
                        gp[r * cols + start + j] = gp[r * cols + start + j] + grad[r * w + j];
                    }
                }
            }
        }
        Rule::GatherRows { ids } => {
            let p = &parents[0];
            if p.requires_grad() {
                let m = node.cols();
                let mut gp = p.grad_buf();
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..m {
                        gp[id * m + j] = gp[id * m + j] + grad[i * m + j];
                    }
                }
            }
        }
        Rule::Reshape => {
            let p = &parents[0];
            if p.requires_grad() {
                p.accumulate_grad(grad);
            }
        }
        Rule::Sum => {
            let p = &parents[0];
            if p.requires_grad() {
                p.accumulate_grad(&vec![grad[0]; p.len()]);
            }
        }
        Rule::StandardizeCols { valid, eps } => {
            let p = &parents[0];
            if p.requires_grad() {
                let (b, n, m) = mat_dims(p).unwrap();
                let x = p.data();
                let y = node.data();
                let mut da = vec![T::zero(); x.len()];
                for bi in 0..b {
                    let base = bi * n * m;
                    let v = valid[bi];
                    let count = T::from_f64(v as f64);
                    let (_, var) = column_stats(&x[base..base + n * m], m, 0, v);
                    for j in 0..m {
                        let s = (var[j] + *eps).sqrt();
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for r in 0..v {
                            let g = grad[base + r * m + j];
                            mg = mg + g;
                            mgy = mgy + g * y[base + r * m + j];
                        }
                        mg = mg / count;
                        mgy = mgy / count;
                        for r in 0..v {
                            let g = grad[base + r * m + j];
                            let yv = y[base + r * m + j];
                            da[base + r * m + j] = (g - mg - yv * mgy) / s;
                        }
                    }
                }
                drop(x);
                drop(y);
                p.accumulate_grad(&da);
            }
        }
        Rule::StandardizeColsCausal { valid, eps } => {
            let p = &parents[0];
            if p.requires_grad() {
                let (b, n, m) = mat_dims(p).unwrap();
                let x = p.data();
                let y = node.data();
                let mut da = vec![T::zero(); x.len()];
                for bi in 0..b {
                    let base = bi * n * m;
                    let v = valid[bi];
                    for j in 0..m {
                        let mut sum = T::zero();
                        let mut sumsq = T::zero();
                        // Row i's statistics cover rows 0..=i, so its output
                        // gradient flows back to every row r ≤ i.
                        for i in 0..v {
                            let xi = x[base + i * m + j];
                            sum = sum + xi;
                            sumsq = sumsq + xi * xi;
                            let g = grad[base + i * m + j];
                            if g == T::zero() {
                                continue;
                            }
                            let k = T::from_f64((i + 1) as f64);
                            let mean = sum / k;
                            let var = (sumsq / k - mean * mean).max(T::zero());
                            let s = (var + *eps).sqrt();
                            let yi = y[base + i * m + j];
                            da[base + i * m + j] = da[base + i * m + j] + g / s;
                            let c1 = g / (k * s);
                            let c2 = g * yi / (k * s * s);
                            for r in 0..=i {
                                let xr = x[base + r * m + j];
                                da[base + r * m + j] =
                                    da[base + r * m + j] - c1 - c2 * (xr - mean);
                            }
                        }
                    }
                }
                drop(x);
                drop(y);
                p.accumulate_grad(&da);
            }
        }
        Rule::StandardizeRows { eps } => {
            let p = &parents[0];
            if p.requires_grad() {
                let d = node.cols();
                let count = T::from_f64(d as f64);
                let x = p.data();
                let y = node.data();
                let mut da = vec![T::zero(); x.len()];
                for r in 0..node.rows() {
                    let xr = &x[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &grad[r * d..(r + 1) * d];
                    let mean = xr.iter().fold(T::zero(), |s, v| s + *v) / count;
                    let var = xr
                        .iter()
                        .fold(T::zero(), |s, v| s + (*v - mean) * (*v - mean))
                        / count;
                    let s = (var + *eps).sqrt();
                    let mg = gr.iter().fold(T::zero(), |a, g| a + *g) / count;
                    let mgy = gr
                        .iter()
                        .zip(yr)
                        .fold(T::zero(), |a, (g, yv)| a + *g * *yv)
                        / count;
                    for ((dv, g), yv) in da[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
                        *dv = (*g - mg - *yv * mgy) / s;
                    }
                }
                drop(x);
                drop(y);
                p.accumulate_grad(&da);
            }
        }
        Rule::Dropout { keep } => {
            let p = &parents[0];
            if p.requires_grad() {
                let da: Vec<T> = grad.iter().zip(keep).map(|(g, k)| *g * *k).collect();
                p.accumulate_grad(&da);
            }
        }
        Rule::MaskedCrossEntropy {
            labels,
            pad_id,
            n_valid,
        } => {
            let p = &parents[0];
            if p.requires_grad() {
                let v = p.cols();
                let x = p.data();
                let g = grad[0] / T::from_f64(*n_valid as f64);
                let mut da = vec![T::zero(); x.len()];
                for (r, &label) in labels.iter().enumerate() {
                    if label == *pad_id {
                        continue;
                    }
                    let row = &x[r * v..(r + 1) * v];
                    let max = row.iter().fold(T::neg_infinity(), |m, xv| m.max(*xv));
                    let mut denom = T::zero();
                    for xv in row {
                        denom = denom + (*xv - max).exp();
                    }
                    let dr = &mut da[r * v..(r + 1) * v];
                    for (d, xv) in dr.iter_mut().zip(row) {
                        *d = g * (*xv - max).exp() / denom;
                    }
                    dr[label as usize] = dr[label as usize] - g;
                }
                drop(x);
                p.accumulate_grad(&da);
            }
        }
    }
}
