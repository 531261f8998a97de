//! catformer: a small encoder-decoder transformer laboratory built from scratch.
//!
//! Two architectures share one numerical core:
//!
//! * `baseline` — additive scaled token + positional input, standard multi-head
//!   attention at stream width `m`.
//! * `proposed` — column-normalized token embeddings concatenated with the
//!   positional table (stream width `2m`), with every attention layer taking the
//!   normalized embedding matrix itself as its value.
//!
//! The crate is organized bottom-up: a dense-tensor reverse-mode autodiff engine
//! (`tensor`), tokenization and batching (`vocab`, `data`), the embedding and
//! attention building blocks (`embedding`, `attention`, `layers`), full model
//! assembly (`model`), and the training loop (`optim`, `train`).

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{ModelConfig, Seq2SeqModel, Variant};
pub use tensor::{Element, Tensor};
