//! Token embedding lookups, the fixed sinusoidal positional table, token
//! normalization (column-wise), and the two ways of combining embeddings with
//! positions: concatenation (proposed) and scaled addition (baseline).

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// ε inside every standardization square root; a constant column or row would
/// otherwise divide by zero and maps to zeros instead.
pub const NORM_EPS: f64 = 1e-6;

/// Fixed sinusoidal position table, `n × m`, values in [−1, 1].
///
/// Indices are 1-based in the defining formula: entry (i, j) of the table
/// (0-based storage) is sin((i+1)/10000^(2(j+1)/m)) for the first m/2
/// columns and cos at the same argument for the rest — a half-sin/half-cos
/// split, not the interleaved layout.
pub fn positional_encoding<T: Element>(n: usize, m: usize) -> Result<Tensor<T>> {
    if m == 0 || m % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even embedding dim, got {m}"
        )));
    }
    if n == 0 {
        return Err(Error::Config("positional encoding needs n ≥ 1".into()));
    }
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let arg = (i + 1) as f64 / 10000f64.powf(2.0 * (j + 1) as f64 / m as f64);
            let v = if j < m / 2 { arg.sin() } else { arg.cos() };
            data.push(T::from_f64(v));
        }
    }
    Tensor::constant(data, vec![n, m])
}

/// Embedding rows for a token sequence: row i = table row ids[i].
pub fn token_embed<T: Element>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    table.gather_rows(&ids)
}

/// Column-wise standardization of a single-sequence embedding matrix: each
/// feature column gets mean 0 and unit population variance over the n rows.
pub fn token_normalize<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(Error::Contract(format!(
            "token_normalize expects one n×m sequence, got {:?}",
            x.shape()
        )));
    }
    x.standardize_cols(&[x.shape()[0]], T::from_f64(NORM_EPS))
}

/// `[X̄ₑ P]`: the normalized embedding beside its positional rows, width 2m.
pub fn concat_embed<T: Element>(x_norm: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    if x_norm.shape() != p.shape() {
        return Err(Error::Dimension {
            op: "concat_embed",
            lhs: x_norm.shape().to_vec(),
            rhs: p.shape().to_vec(),
        });
    }
    Tensor::concat_cols(&[x_norm, p])
}

/// How the additive input combines the embedding with the position table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedScaleMode {
    /// The formula as written: X/√m + P.
    Divide,
    /// The convention of the tutorial lineage: √m·X + P.
    Multiply,
}

impl EmbedScaleMode {
    pub fn factor<T: Element>(self, m: usize) -> T {
        let root = (m as f64).sqrt();
        match self {
            EmbedScaleMode::Divide => T::from_f64(1.0 / root),
            EmbedScaleMode::Multiply => T::from_f64(root),
        }
    }
}

/// Additive input for the baseline: scale·X_e + P.
pub fn baseline_embed_input<T: Element>(
    x_e: &Tensor<T>,
    p: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>> {
    if x_e.shape() != p.shape() {
        return Err(Error::Dimension {
            op: "baseline_embed_input",
            lhs: x_e.shape().to_vec(),
            rhs: p.shape().to_vec(),
        });
    }
    x_e.scale(scale).add(p)
}
