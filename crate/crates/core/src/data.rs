//! Parallel-corpus ingestion and batch assembly: shuffling, length capping,
//! padding, and the teacher-forcing shift.

use crate::error::{Error, Result};
use crate::vocab::{Vocab, END, PAD, START};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One sentence pair, tokenized. `tgt_ids` is bracketed START … END.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub src_ids: Vec<u32>,
    pub tgt_ids: Vec<u32>,
}

/// A padded training batch. Token ids are stored row-major `[batch, len]`;
/// `labels[i]` is the token following `dec_input[i]`, so the decoder learns
/// next-token prediction under teacher forcing.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub n_src: usize,
    pub n_tgt: usize,
    pub enc_input: Vec<u32>,
    pub dec_input: Vec<u32>,
    pub labels: Vec<u32>,
    /// Non-pad position counts per row (source / target streams).
    pub src_valid: Vec<usize>,
    pub tgt_valid: Vec<usize>,
}

impl Batch {
    /// Order-sensitive content hash (FNV-1a) over shapes and ids; used to
    /// assert that two runs consumed identical batch streams.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.batch as u64);
        eat(self.n_src as u64);
        eat(self.n_tgt as u64);
        for &id in self.enc_input.iter().chain(&self.dec_input).chain(&self.labels) {
            eat(id as u64);
        }
        h
    }
}

/// Combined checksum of a whole batch stream.
pub fn batches_checksum(batches: &[Batch]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in batches {
        for byte in b.checksum().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Reads a UTF-8 file of `source<TAB>target` lines. Blank lines are skipped;
/// a non-blank line without a TAB is a parse error naming its line number.
pub fn load_parallel_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((src, tgt)) => pairs.push((src.to_string(), tgt.to_string())),
            None => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected a single TAB between source and target".into(),
                })
            }
        }
    }
    Ok(pairs)
}

/// Tokenizes sentence pairs and brackets targets with START/END. Pairs whose
/// source or target tokenizes to nothing (blank fields) are dropped: they
/// carry no trainable signal and an empty source cannot be encoded.
pub fn tokenize_pairs(
    pairs: &[(String, String)],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
) -> Vec<TokenizedPair> {
    pairs
        .iter()
        .filter_map(|(src, tgt)| {
            let src_ids = src_vocab.tokenize(src);
            let core = tgt_vocab.tokenize(tgt);
            if src_ids.is_empty() || core.is_empty() {
                return None;
            }
            let mut tgt_ids = Vec::with_capacity(core.len() + 2);
            tgt_ids.push(START);
            tgt_ids.extend(core);
            tgt_ids.push(END);
            Some(TokenizedPair { src_ids, tgt_ids })
        })
        .collect()
}

/// Shuffles pairs with a seeded RNG, caps sequence lengths at `max_len`
/// (targets keep their END token), groups into batches padded to the longest
/// row in each batch, and applies the teacher-forcing shift.
pub fn make_batches(
    pairs: &[TokenizedPair],
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::Input("no sentence pairs to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    if max_len < 2 {
        return Err(Error::Config("max_len must be ≥ 2".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut batches = Vec::with_capacity(pairs.len().div_ceil(batch_size));
    for group in order.chunks(batch_size) {
        let rows: Vec<(Vec<u32>, Vec<u32>)> = group
            .iter()
            .map(|&i| {
                let p = &pairs[i];
                let src = cap(&p.src_ids, max_len, false);
                // dec_input/labels are one shorter than the bracketed target,
                // so the target may keep max_len+1 tokens.
                let tgt = cap(&p.tgt_ids, max_len + 1, true);
                (src, tgt)
            })
            .collect();
        let n_src = rows.iter().map(|(s, _)| s.len()).max().unwrap();
        let n_tgt = rows.iter().map(|(_, t)| t.len() - 1).max().unwrap();
        let b = rows.len();
        let mut batch = Batch {
            batch: b,
            n_src,
            n_tgt,
            enc_input: vec![PAD; b * n_src],
            dec_input: vec![PAD; b * n_tgt],
            labels: vec![PAD; b * n_tgt],
            src_valid: Vec::with_capacity(b),
            tgt_valid: Vec::with_capacity(b),
        };
        for (r, (src, tgt)) in rows.iter().enumerate() {
            batch.enc_input[r * n_src..r * n_src + src.len()].copy_from_slice(src);
            let dec = &tgt[..tgt.len() - 1];
            let lab = &tgt[1..];
            batch.dec_input[r * n_tgt..r * n_tgt + dec.len()].copy_from_slice(dec);
            batch.labels[r * n_tgt..r * n_tgt + lab.len()].copy_from_slice(lab);
            batch.src_valid.push(src.len());
            batch.tgt_valid.push(dec.len());
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Truncates to `limit` tokens; `keep_end` preserves a final END marker.
fn cap(ids: &[u32], limit: usize, keep_end: bool) -> Vec<u32> {
    if ids.len() <= limit {
        return ids.to_vec();
    }
    let mut out = ids[..limit].to_vec();
    if keep_end {
        out[limit - 1] = END;
    }
    out
}
