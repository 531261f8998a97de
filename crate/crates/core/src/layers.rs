//! Layer normalization (with learned gain/bias) and the position-wise
//! feed-forward network, plus the seeded parameter initializer shared by
//! every weight container.

use crate::embedding::NORM_EPS;
use crate::error::Result;
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Builds trainable leaves and records each under a unique name, so the
/// optimizer, checkpointing, and parameter counting all see the same
/// inventory in the same order.
pub(crate) struct ParamBuilder<'a, T: Element> {
    rng: &'a mut ChaCha8Rng,
    registry: Vec<(String, Tensor<T>)>,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            rng,
            registry: Vec::new(),
        }
    }

    /// Uniform Glorot-style init: U(−L, L) with L = √(6/(fan_in+fan_out)).
    pub fn glorot(&mut self, name: String, rows: usize, cols: usize) -> Tensor<T> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<T> = (0..rows * cols)
            .map(|_| T::from_f64(self.rng.gen_range(-limit..limit)))
            .collect();
        self.record(name, Tensor::param(data, vec![rows, cols]).expect("valid shape"))
    }

    pub fn filled(&mut self, name: String, len: usize, value: f64) -> Tensor<T> {
        self.record(
            name,
            Tensor::param(vec![T::from_f64(value); len], vec![len]).expect("valid shape"),
        )
    }

    fn record(&mut self, name: String, t: Tensor<T>) -> Tensor<T> {
        self.registry.push((name, t.clone()));
        t
    }

    pub fn finish(self) -> Vec<(String, Tensor<T>)> {
        self.registry
    }
}

/// Row-wise standardization followed by a learned per-feature gain and bias.
pub struct LayerNorm<T: Element> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> LayerNorm<T> {
    pub(crate) fn new(b: &mut ParamBuilder<'_, T>, prefix: &str, d: usize) -> Self {
        LayerNorm {
            gain: b.filled(format!("{prefix}.gain"), d, 1.0),
            bias: b.filled(format!("{prefix}.bias"), d, 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.standardize_rows(T::from_f64(NORM_EPS))?
            .mul(&self.gain)?
            .add(&self.bias)
    }
}

/// relu(X·W1 + B1)·W2 + B2, widening d → s_ffn → d.
pub struct FeedForward<T: Element> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Element> FeedForward<T> {
    pub(crate) fn new(b: &mut ParamBuilder<'_, T>, prefix: &str, d: usize, s_ffn: usize) -> Self {
        FeedForward {
            w1: b.glorot(format!("{prefix}.w1"), d, s_ffn),
            b1: b.filled(format!("{prefix}.b1"), s_ffn, 0.0),
            w2: b.glorot(format!("{prefix}.w2"), s_ffn, d),
            b2: b.filled(format!("{prefix}.b2"), d, 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.w1)?
            .add(&self.b1)?
            .relu()?
            .matmul(&self.w2)?
            .add(&self.b2)
    }
}
