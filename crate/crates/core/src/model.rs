//! Full encoder–decoder assembly for both architectures.
//!
//! The two variants share every building block; they differ only in how the
//! input stream is formed and where attention takes its values from:
//!
//! * `baseline` — stream = scaled token embedding + positional table (width
//!   m); every attention layer projects queries, keys, AND values from the
//!   evolving stream.
//! * `proposed` — stream = [column-normalized token embedding ‖ positional
//!   table] (width 2m); every attention layer projects queries/keys from the
//!   stream but takes its values from the same normalized embedding matrix,
//!   block after block. Decoder-side normalization uses causal prefix
//!   statistics so position i never sees rows after i.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{causal_mask, pad_key_mask, MultiHeadWeights};
use crate::data::Batch;
use crate::embedding::{positional_encoding, token_embed, EmbedScaleMode, NORM_EPS};
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, ParamBuilder};
use crate::tensor::{masked_cross_entropy, Element, Tensor};
use crate::vocab::{END, PAD, START};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Proposed,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "proposed" => Ok(Variant::Proposed),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected \"baseline\" or \"proposed\")"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Proposed => "proposed",
        })
    }
}

/// What the attention score divisor √d refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnScale {
    /// The embedding dimension m, as the formula is written.
    EmbedDim,
    /// The per-head query/key width (the usual convention elsewhere).
    HeadDim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Encoder and decoder block count N.
    pub n_blocks: usize,
    /// Token embedding width m. The proposed stream is 2m wide.
    pub m: usize,
    /// Feed-forward hidden width.
    pub s_ffn: usize,
    /// Attention head count.
    pub p: usize,
    /// Per-head query/key width.
    pub r_q: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Longest supported sequence (positional table height).
    pub max_len: usize,
    pub dropout: f64,
    /// Baseline-only: how the token embedding is scaled before adding the
    /// positional table.
    pub embed_scale: EmbedScaleMode,
    pub attn_scale: AttnScale,
}

impl ModelConfig {
    pub fn baseline_defaults(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            n_blocks: 4,
            m: 128,
            s_ffn: 512,
            p: 8,
            r_q: 128,
            src_vocab,
            tgt_vocab,
            max_len: 64,
            dropout: 0.1,
            embed_scale: EmbedScaleMode::Divide,
            attn_scale: AttnScale::EmbedDim,
        }
    }

    pub fn proposed_defaults(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            variant: Variant::Proposed,
            n_blocks: 2,
            m: 64,
            s_ffn: 256,
            p: 4,
            r_q: 64,
            src_vocab,
            tgt_vocab,
            max_len: 64,
            dropout: 0.1,
            embed_scale: EmbedScaleMode::Divide,
            attn_scale: AttnScale::EmbedDim,
        }
    }

    pub fn defaults(variant: Variant, src_vocab: usize, tgt_vocab: usize) -> Self {
        match variant {
            Variant::Baseline => Self::baseline_defaults(src_vocab, tgt_vocab),
            Variant::Proposed => Self::proposed_defaults(src_vocab, tgt_vocab),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m % 2 != 0 {
            return Err(Error::Config(format!("m must be even and ≥ 2, got {}", self.m)));
        }
        if self.p == 0 || self.r_q == 0 || self.s_ffn == 0 {
            return Err(Error::Config(
                "p, r_q, and s_ffn must all be ≥ 1".into(),
            ));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(Error::Config(
                "vocabularies must include the four reserved tokens".into(),
            ));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!(
                "max_len must be ≥ 2, got {}",
                self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Residual stream width: m for the baseline, 2m for the proposed stack.
    pub fn stream_width(&self) -> usize {
        match self.variant {
            Variant::Baseline => self.m,
            Variant::Proposed => 2 * self.m,
        }
    }

    pub fn scale_dim(&self) -> usize {
        match self.attn_scale {
            AttnScale::EmbedDim => self.m,
            AttnScale::HeadDim => self.r_q,
        }
    }

    /// (query/key input width, value input width, r, q, output width).
    fn attn_dims(&self) -> (usize, usize, usize, usize, usize) {
        match self.variant {
            Variant::Baseline => (self.m, self.m, self.r_q, self.r_q, self.m),
            Variant::Proposed => (2 * self.m, self.m, self.r_q, self.m, 2 * self.m),
        }
    }

    fn attention_params(&self) -> usize {
        let (d_qk, d_v, r, q, d_out) = self.attn_dims();
        self.p * (2 * (d_qk * r + r) + (d_v * q + q)) + (self.p * q * d_out + d_out)
    }

    fn layer_norm_params(&self) -> usize {
        2 * self.stream_width()
    }

    fn feed_forward_params(&self) -> usize {
        let d = self.stream_width();
        d * self.s_ffn + self.s_ffn + self.s_ffn * d + d
    }

    fn encoder_block_params(&self) -> usize {
        self.attention_params() + self.feed_forward_params() + 2 * self.layer_norm_params()
    }

    fn decoder_block_params(&self) -> usize {
        2 * self.attention_params() + self.feed_forward_params() + 3 * self.layer_norm_params()
    }

    /// Named sections summing exactly to `count_parameters`.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        vec![
            ("source embeddings".into(), self.src_vocab * self.m),
            ("target embeddings".into(), self.tgt_vocab * self.m),
            (
                format!("encoder stack ({} blocks)", self.n_blocks),
                self.n_blocks * self.encoder_block_params(),
            ),
            (
                format!("decoder stack ({} blocks)", self.n_blocks),
                self.n_blocks * self.decoder_block_params(),
            ),
            (
                "output projection".into(),
                self.stream_width() * self.tgt_vocab + self.tgt_vocab,
            ),
        ]
    }

    /// Trainable scalar count, by arithmetic alone (no model allocation).
    pub fn count_parameters(&self) -> usize {
        self.parameter_breakdown().iter().map(|(_, n)| n).sum()
    }
}

/// Partial configuration as read from a TOML file; unset fields fall back to
/// the chosen variant's defaults. Vocabulary sizes always come from the vocab
/// files, never from here.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub variant: Option<Variant>,
    pub n_blocks: Option<usize>,
    pub m: Option<usize>,
    pub s_ffn: Option<usize>,
    pub p: Option<usize>,
    pub r_q: Option<usize>,
    pub max_len: Option<usize>,
    pub dropout: Option<f64>,
    pub embed_scale: Option<EmbedScaleMode>,
    pub attn_scale: Option<AttnScale>,
}

impl ConfigOverrides {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config file: {e}")))
    }

    /// Resolves against the defaults of `variant` (an explicit `variant` key
    /// in the file wins over the argument) and validates the result.
    pub fn resolve(&self, variant: Variant, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::defaults(self.variant.unwrap_or(variant), src_vocab, tgt_vocab);
        if let Some(v) = self.n_blocks {
            cfg.n_blocks = v;
        }
        if let Some(v) = self.m {
            cfg.m = v;
        }
        if let Some(v) = self.s_ffn {
            cfg.s_ffn = v;
        }
        if let Some(v) = self.p {
            cfg.p = v;
        }
        if let Some(v) = self.r_q {
            cfg.r_q = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.embed_scale {
            cfg.embed_scale = v;
        }
        if let Some(v) = self.attn_scale {
            cfg.attn_scale = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct EncoderBlock<T: Element> {
    attn: MultiHeadWeights<T>,
    ln1: LayerNorm<T>,
    ffn: FeedForward<T>,
    ln2: LayerNorm<T>,
}

impl<T: Element> EncoderBlock<T> {
    fn new(b: &mut ParamBuilder<'_, T>, prefix: &str, cfg: &ModelConfig) -> Self {
        let (d_qk, d_v, r, q, d_out) = cfg.attn_dims();
        EncoderBlock {
            attn: MultiHeadWeights::new(b, &format!("{prefix}.attn"), d_qk, d_v, r, q, cfg.p, d_out),
            ln1: LayerNorm::new(b, &format!("{prefix}.ln1"), cfg.stream_width()),
            ffn: FeedForward::new(b, &format!("{prefix}.ffn"), cfg.stream_width(), cfg.s_ffn),
            ln2: LayerNorm::new(b, &format!("{prefix}.ln2"), cfg.stream_width()),
        }
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        values: Option<&Tensor<T>>,
        pad_mask: Option<&Tensor<T>>,
        scale_dim: usize,
        rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        let v_src = values.unwrap_or(x);
        let a = self
            .attn
            .forward(x, x, v_src, pad_mask, scale_dim)?
            .dropout(rate, rng)?;
        let x = self.ln1.forward(&x.add(&a)?)?;
        let f = self.ffn.forward(&x)?.dropout(rate, rng)?;
        self.ln2.forward(&x.add(&f)?)
    }
}

struct DecoderBlock<T: Element> {
    self_attn: MultiHeadWeights<T>,
    ln1: LayerNorm<T>,
    cross_attn: MultiHeadWeights<T>,
    ln2: LayerNorm<T>,
    ffn: FeedForward<T>,
    ln3: LayerNorm<T>,
}

impl<T: Element> DecoderBlock<T> {
    fn new(b: &mut ParamBuilder<'_, T>, prefix: &str, cfg: &ModelConfig) -> Self {
        let (d_qk, d_v, r, q, d_out) = cfg.attn_dims();
        DecoderBlock {
            self_attn: MultiHeadWeights::new(b, &format!("{prefix}.self"), d_qk, d_v, r, q, cfg.p, d_out),
            ln1: LayerNorm::new(b, &format!("{prefix}.ln1"), cfg.stream_width()),
            cross_attn: MultiHeadWeights::new(b, &format!("{prefix}.cross"), d_qk, d_v, r, q, cfg.p, d_out),
            ln2: LayerNorm::new(b, &format!("{prefix}.ln2"), cfg.stream_width()),
            ffn: FeedForward::new(b, &format!("{prefix}.ffn"), cfg.stream_width(), cfg.s_ffn),
            ln3: LayerNorm::new(b, &format!("{prefix}.ln3"), cfg.stream_width()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        y: &Tensor<T>,
        enc_stream: &Tensor<T>,
        self_values: Option<&Tensor<T>>,
        cross_values: Option<&Tensor<T>>,
        causal: &Tensor<T>,
        src_pad_mask: Option<&Tensor<T>>,
        scale_dim: usize,
        rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        let sv = self_values.unwrap_or(y);
        let a = self
            .self_attn
            .forward(y, y, sv, Some(causal), scale_dim)?
            .dropout(rate, rng)?;
        let y = self.ln1.forward(&y.add(&a)?)?;
        let cv = cross_values.unwrap_or(enc_stream);
        let c = self
            .cross_attn
            .forward(&y, enc_stream, cv, src_pad_mask, scale_dim)?
            .dropout(rate, rng)?;
        let y = self.ln2.forward(&y.add(&c)?)?;
        let f = self.ffn.forward(&y)?.dropout(rate, rng)?;
        self.ln3.forward(&y.add(&f)?)
    }
}

/// Everything the decoder needs from a finished encoder pass.
pub struct EncOutput<T: Element> {
    pub stream: Tensor<T>,
    /// Proposed variant only: the normalized source embedding reused as the
    /// value matrix by every cross-attention layer.
    pub value_embed: Option<Tensor<T>>,
    pub pad_mask: Option<Tensor<T>>,
}

/// Records which tensor each attention site consumed as its value input, in
/// block order. For the proposed variant every entry within a group must be
/// the same matrix, bit for bit.
pub struct ForwardTrace<T: Element> {
    pub enc_values: Vec<Tensor<T>>,
    pub dec_self_values: Vec<Tensor<T>>,
    pub dec_cross_values: Vec<Tensor<T>>,
}

impl<T: Element> Default for ForwardTrace<T> {
    fn default() -> Self {
        ForwardTrace {
            enc_values: Vec::new(),
            dec_self_values: Vec::new(),
            dec_cross_values: Vec::new(),
        }
    }
}

pub struct Seq2SeqModel<T: Element> {
    config: ModelConfig,
    src_embed: Tensor<T>,
    tgt_embed: Tensor<T>,
    /// Constant sinusoidal table, [max_len, m]; not a trainable parameter.
    pos: Tensor<T>,
    enc_blocks: Vec<EncoderBlock<T>>,
    dec_blocks: Vec<DecoderBlock<T>>,
    proj_w: Tensor<T>,
    proj_b: Tensor<T>,
    registry: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Seq2SeqModel<T> {
    /// Builds and initializes all weights from one seed. Construction order
    /// is fixed, so a given (config, seed) pair always yields the same model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let src_embed = b.glorot("src_embed".to_string(), config.src_vocab, config.m);
        let tgt_embed = b.glorot("tgt_embed".to_string(), config.tgt_vocab, config.m);
        let enc_blocks = (0..config.n_blocks)
            .map(|i| EncoderBlock::new(&mut b, &format!("enc.{i}"), &config))
            .collect();
        let dec_blocks = (0..config.n_blocks)
            .map(|i| DecoderBlock::new(&mut b, &format!("dec.{i}"), &config))
            .collect();
        let proj_w = b.glorot("proj.w".to_string(), config.stream_width(), config.tgt_vocab);
        let proj_b = b.filled("proj.b".to_string(), config.tgt_vocab, 0.0);
        let registry = b.finish();
        let pos = positional_encoding(config.max_len, config.m)?;
        Ok(Seq2SeqModel {
            config,
            src_embed,
            tgt_embed,
            pos,
            enc_blocks,
            dec_blocks,
            proj_w,
            proj_b,
            registry,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Name → tensor pairs in construction order. The order is the contract
    /// for optimizer state and checkpoints.
    pub fn parameters(&self) -> &[(String, Tensor<T>)] {
        &self.registry
    }

    /// Scalar count from the live registry (cross-check for the arithmetic
    /// in `ModelConfig::count_parameters`).
    pub fn registry_parameter_count(&self) -> usize {
        self.registry.iter().map(|(_, t)| t.len()).sum()
    }

    /// The positional rows for one sequence length, repeated per batch row.
    fn pos_tile(&self, batch: usize, n: usize) -> Result<Tensor<T>> {
        let m = self.config.m;
        let pos = self.pos.data();
        let slice = &pos[..n * m];
        let mut data = Vec::with_capacity(batch * n * m);
        for _ in 0..batch {
            data.extend_from_slice(slice);
        }
        Tensor::constant(data, vec![batch, n, m])
    }

    fn check_ids(&self, ids: &[u32], valid: &[usize], side: &str) -> Result<usize> {
        let batch = valid.len();
        if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
            return Err(Error::Input(format!(
                "{side}: {} ids cannot form {batch} rows",
                ids.len()
            )));
        }
        let n = ids.len() / batch;
        if n > self.config.max_len {
            return Err(Error::Input(format!(
                "{side} length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(n)
    }

    pub fn encode(
        &self,
        src_ids: &[u32],
        valid: &[usize],
        training: bool,
        rng: &mut impl Rng,
        mut trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<EncOutput<T>> {
        let batch = valid.len();
        let n = self.check_ids(src_ids, valid, "encoder input")?;
        let e = token_embed(&self.src_embed, src_ids)?.reshape(vec![batch, n, self.config.m])?;
        let p = self.pos_tile(batch, n)?;
        let rate = if training { self.config.dropout } else { 0.0 };
        let pad_mask = pad_key_mask::<T>(src_ids, batch, n, PAD);
        let scale_dim = self.config.scale_dim();
        match self.config.variant {
            Variant::Baseline => {
                let factor: T = self.config.embed_scale.factor(self.config.m);
                let mut x = e.scale(factor).add(&p)?.dropout(rate, rng)?;
                for blk in &self.enc_blocks {
                    if let Some(t) = trace.as_deref_mut() {
                        t.enc_values.push(x.clone());
                    }
                    x = blk.forward(&x, None, pad_mask.as_ref(), scale_dim, rate, rng)?;
                }
                Ok(EncOutput {
                    stream: x,
                    value_embed: None,
                    pad_mask,
                })
            }
            Variant::Proposed => {
                let xe = e.standardize_cols(valid, T::from_f64(NORM_EPS))?;
                let mut x = Tensor::concat_cols(&[&xe, &p])?.dropout(rate, rng)?;
                for blk in &self.enc_blocks {
                    if let Some(t) = trace.as_deref_mut() {
                        t.enc_values.push(xe.clone());
                    }
                    x = blk.forward(&x, Some(&xe), pad_mask.as_ref(), scale_dim, rate, rng)?;
                }
                Ok(EncOutput {
                    stream: x,
                    value_embed: Some(xe),
                    pad_mask,
                })
            }
        }
    }

    /// Runs the decoder over a (right-shifted) target prefix and returns
    /// logits of shape [batch, n, tgt_vocab].
    pub fn decode(
        &self,
        tgt_ids: &[u32],
        valid: &[usize],
        enc: &EncOutput<T>,
        training: bool,
        rng: &mut impl Rng,
        mut trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Tensor<T>> {
        let batch = valid.len();
        let n = self.check_ids(tgt_ids, valid, "decoder input")?;
        if enc.stream.shape()[0] != batch {
            return Err(Error::Contract(format!(
                "decoder batch {batch} does not match encoder batch {}",
                enc.stream.shape()[0]
            )));
        }
        let e = token_embed(&self.tgt_embed, tgt_ids)?.reshape(vec![batch, n, self.config.m])?;
        let p = self.pos_tile(batch, n)?;
        let rate = if training { self.config.dropout } else { 0.0 };
        let causal = causal_mask::<T>(n);
        let scale_dim = self.config.scale_dim();
        let mut y = match self.config.variant {
            Variant::Baseline => {
                let factor: T = self.config.embed_scale.factor(self.config.m);
                let mut y = e.scale(factor).add(&p)?.dropout(rate, rng)?;
                for blk in &self.dec_blocks {
                    if let Some(t) = trace.as_deref_mut() {
                        t.dec_self_values.push(y.clone());
                        t.dec_cross_values.push(enc.stream.clone());
                    }
                    y = blk.forward(
                        &y,
                        &enc.stream,
                        None,
                        None,
                        &causal,
                        enc.pad_mask.as_ref(),
                        scale_dim,
                        rate,
                        rng,
                    )?;
                }
                y
            }
            Variant::Proposed => {
                // Causal prefix statistics keep the normalization itself from
                // leaking future tokens into earlier positions.
                let ye = e.standardize_cols_causal(valid, T::from_f64(NORM_EPS))?;
                let mut y = Tensor::concat_cols(&[&ye, &p])?.dropout(rate, rng)?;
                for blk in &self.dec_blocks {
                    if let Some(t) = trace.as_deref_mut() {
                        t.dec_self_values.push(ye.clone());
                        if let Some(xe) = &enc.value_embed {
                            t.dec_cross_values.push(xe.clone());
                        }
                    }
                    y = blk.forward(
                        &y,
                        &enc.stream,
                        Some(&ye),
                        enc.value_embed.as_ref(),
                        &causal,
                        enc.pad_mask.as_ref(),
                        scale_dim,
                        rate,
                        rng,
                    )?;
                }
                y
            }
        };
        y = y.matmul(&self.proj_w)?;
        y.add(&self.proj_b)
    }

    /// Full teacher-forced pass over one batch → logits [batch, n_tgt, V].
    pub fn forward(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut impl Rng,
        mut trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Tensor<T>> {
        let enc = self.encode(
            &batch.enc_input,
            &batch.src_valid,
            training,
            rng,
            trace.as_deref_mut(),
        )?;
        self.decode(
            &batch.dec_input,
            &batch.tgt_valid,
            &enc,
            training,
            rng,
            trace.as_deref_mut(),
        )
    }

    /// Mean cross-entropy over the batch's non-pad label positions.
    pub fn loss(&self, batch: &Batch, training: bool, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let logits = self.forward(batch, training, rng, None)?;
        let flat = logits.reshape(vec![batch.batch * batch.n_tgt, self.config.tgt_vocab])?;
        masked_cross_entropy(&flat, &batch.labels, PAD)
    }

    /// Deterministic greedy translation of one source sequence. Returns the
    /// generated ids without the START/END markers. Ties on the argmax go to
    /// the lowest id.
    pub fn greedy_decode(&self, src_ids: &[u32], max_new: usize) -> Result<Vec<u32>> {
        if src_ids.is_empty() {
            return Err(Error::Input("cannot translate an empty sequence".into()));
        }
        // Dropout is off outside training, so this RNG is never consumed.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.encode(src_ids, &[src_ids.len()], false, &mut rng, None)?;
        let mut ys = vec![START];
        let mut out = Vec::new();
        while out.len() < max_new && ys.len() <= self.config.max_len {
            let logits = self.decode(&ys, &[ys.len()], &enc, false, &mut rng, None)?;
            let v = self.config.tgt_vocab;
            let data = logits.data();
            let last = &data[(ys.len() - 1) * v..ys.len() * v];
            let mut best = 0usize;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            drop(data);
            let next = best as u32;
            if next == END {
                break;
            }
            out.push(next);
            ys.push(next);
        }
        Ok(out)
    }
}
