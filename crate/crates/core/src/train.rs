//! Epoch loop, evaluation, and the metrics table.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batches, Batch, TokenizedPair};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::optim::{Adam, LrSchedule};
use crate::tensor::Element;
use crate::vocab::PAD;

#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub max_epochs: usize,
    /// Wall-clock ceiling, checked at epoch boundaries.
    pub max_hours: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub max_len: usize,
    /// Warmup steps for the learning-rate schedule.
    pub warmup: usize,
    /// Seeds batch shuffling (advanced by one per epoch).
    pub data_seed: u64,
    /// Seeds the dropout stream, independent of weight init and batching.
    pub dropout_seed: u64,
    pub budget: Budget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when no validation set was given.
    pub val_loss: f64,
    pub epoch_seconds: f64,
}

fn non_pad_labels(b: &Batch) -> usize {
    b.labels.iter().filter(|&&l| l != PAD).count()
}

/// One pass over the batches with backprop and Adam updates. Returns the
/// token-weighted mean of the per-batch losses (each batch's loss is already
/// a mean over its own non-pad labels).
pub fn train_epoch<T: Element>(
    model: &Seq2SeqModel<T>,
    batches: &[Batch],
    opt: &mut Adam<T>,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Input("no batches to train on".into()));
    }
    let mut weighted = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let loss = model.loss(b, true, rng)?;
        let value = loss.item().to_f64();
        loss.backward()?;
        opt.step(model.parameters())?;
        let n = non_pad_labels(b);
        weighted += value * n as f64;
        tokens += n;
    }
    Ok(weighted / tokens as f64)
}

/// Token-weighted mean loss with dropout disabled and no updates.
pub fn evaluate<T: Element>(model: &Seq2SeqModel<T>, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Input("no batches to evaluate".into()));
    }
    // Dropout is off in evaluation, so this RNG is never consumed.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut weighted = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let loss = model.loss(b, false, &mut rng)?;
        let n = non_pad_labels(b);
        weighted += loss.item().to_f64() * n as f64;
        tokens += n;
    }
    Ok(weighted / tokens as f64)
}

/// Trains until the epoch or wall-clock budget runs out. Batches are
/// reshuffled every epoch from `data_seed + epoch`; `epoch_seconds` measures
/// the gradient work only, not validation.
pub fn run_experiment<T: Element>(
    model: &Seq2SeqModel<T>,
    train_pairs: &[TokenizedPair],
    val_pairs: &[TokenizedPair],
    opts: &TrainOptions,
) -> Result<Vec<EpochMetrics>> {
    let schedule = LrSchedule::new(model.config().m, opts.warmup)?;
    let mut opt = Adam::new(model.parameters(), schedule);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
    let val_batches = if val_pairs.is_empty() {
        Vec::new()
    } else {
        make_batches(val_pairs, opts.batch_size, opts.max_len, opts.data_seed)?
    };
    let started = Instant::now();
    let mut out = Vec::new();
    for epoch in 1..=opts.budget.max_epochs {
        let batches = make_batches(
            train_pairs,
            opts.batch_size,
            opts.max_len,
            opts.data_seed.wrapping_add(epoch as u64),
        )?;
        let t0 = Instant::now();
        let train_loss = train_epoch(model, &batches, &mut opt, &mut drop_rng)?;
        let epoch_seconds = t0.elapsed().as_secs_f64();
        let val_loss = if val_batches.is_empty() {
            f64::NAN
        } else {
            evaluate(model, &val_batches)?
        };
        out.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            epoch_seconds,
        });
        if started.elapsed().as_secs_f64() > opts.budget.max_hours * 3600.0 {
            break;
        }
    }
    Ok(out)
}

/// Fraction of pairs whose greedy translation reproduces the reference
/// exactly (markers excluded).
pub fn exact_match_accuracy<T: Element>(
    model: &Seq2SeqModel<T>,
    pairs: &[TokenizedPair],
    max_new: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("no pairs to score".into()));
    }
    let mut hits = 0usize;
    for p in pairs {
        let want = &p.tgt_ids[1..p.tgt_ids.len() - 1];
        if model.greedy_decode(&p.src_ids, max_new)? == want {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

pub const METRICS_HEADER: &str = "trial,epoch,variant,train_loss,val_loss,epoch_seconds";

/// One line of the metrics table, as written by the benchmark harness.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub trial: usize,
    pub epoch: usize,
    pub variant: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub epoch_seconds: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{:.6},{:.6},{:.3}",
            r.trial, r.epoch, r.variant, r.train_loss, r.val_loss, r.epoch_seconds
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {METRICS_HEADER:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        if parts.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", parts.len())));
        }
        rows.push(MetricsRow {
            trial: parts[0]
                .parse()
                .map_err(|e| bad(format!("trial: {e}")))?,
            epoch: parts[1]
                .parse()
                .map_err(|e| bad(format!("epoch: {e}")))?,
            variant: parts[2].to_string(),
            train_loss: parts[3]
                .parse()
                .map_err(|e| bad(format!("train_loss: {e}")))?,
            val_loss: parts[4]
                .parse()
                .map_err(|e| bad(format!("val_loss: {e}")))?,
            epoch_seconds: parts[5]
                .parse()
                .map_err(|e| bad(format!("epoch_seconds: {e}")))?,
        });
    }
    Ok(rows)
}
