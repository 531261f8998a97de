//! Wordpiece vocabulary: frequency-merge training, greedy longest-match
//! tokenization, and the one-token-per-line file format.
//!
//! Words are NFKC-normalized and whitespace-split. Inside a word the first
//! piece is bare and every continuation piece carries a `##` prefix. A word
//! that cannot be fully covered by pieces collapses to a single `[UNK]`.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use unicode_normalization::UnicodeNormalization;

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;

/// Reserved tokens, in id order. Always the first four vocabulary entries.
pub const RESERVED: [&str; 4] = ["[PAD]", "[START]", "[END]", "[UNK]"];

/// An immutable token list with dense ids; ids 0..3 are reserved.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            match tokens.get(i) {
                Some(t) if t == r => {}
                Some(t) => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected reserved token {r}, found {t:?}"),
                    })
                }
                None => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("missing reserved token {r}"),
                    })
                }
            }
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Vocab { tokens, id_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::Index {
                op: "vocab token lookup",
                index: id as usize,
                bound: self.tokens.len(),
            })
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    /// Trains a wordpiece vocabulary: the character alphabet plus iteratively
    /// merged frequent adjacent pairs, capped at `target_size` tokens total.
    /// Deterministic: ties in pair frequency break lexicographically.
    pub fn train_wordpiece(lines: &[String], target_size: usize) -> Result<Self> {
        if target_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab size must exceed the {} reserved tokens, got {target_size}",
                RESERVED.len()
            )));
        }
        // Word frequencies over the normalized corpus.
        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for line in lines {
            for w in normalize(line).split_whitespace() {
                *word_freq.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(Error::Input("empty corpus: no words to learn from".into()));
        }

        // Each word is a symbol sequence: first char bare, the rest ##-prefixed.
        let mut words: Vec<(Vec<String>, u64)> = word_freq
            .iter()
            .map(|(w, f)| {
                let symbols = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        if i == 0 {
                            c.to_string()
                        } else {
                            format!("##{c}")
                        }
                    })
                    .collect();
                (symbols, *f)
            })
            .collect();

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
        let push = |tokens: &mut Vec<String>, seen: &mut HashMap<String, ()>, t: String| {
            if tokens.len() < target_size && !seen.contains_key(&t) {
                seen.insert(t.clone(), ());
                tokens.push(t);
            }
        };

        // Alphabet first, sorted for determinism.
        let mut alphabet: Vec<String> = words
            .iter()
            .flat_map(|(syms, _)| syms.iter().cloned())
            .collect();
        alphabet.sort();
        alphabet.dedup();
        for s in alphabet {
            push(&mut tokens, &mut seen, s);
        }

        // Merge loop: most frequent adjacent pair wins; merging "a"+"##b"
        // yields "ab", "##a"+"##b" yields "##ab".
        while tokens.len() < target_size {
            let mut pair_freq: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (syms, f) in &words {
                for w in syms.windows(2) {
                    *pair_freq
                        .entry((w[0].clone(), w[1].clone()))
                        .or_insert(0) += f;
                }
            }
            // BTreeMap iteration is sorted, so `>` keeps the smallest best pair.
            let best = pair_freq
                .iter()
                .fold(None::<(&(String, String), u64)>, |acc, (p, f)| match acc {
                    Some((_, bf)) if bf >= *f => acc,
                    _ => Some((p, *f)),
                });
            let Some(((left, right), freq)) = best.map(|(p, f)| (p.clone(), f)) else {
                break; // no adjacent pairs remain
            };
            if freq < 2 {
                break; // merging singletons adds no generalization
            }
            let merged = format!("{left}{}", right.trim_start_matches("##"));
            for (syms, _) in words.iter_mut() {
                let mut i = 0;
                while i + 1 < syms.len() {
                    if syms[i] == left && syms[i + 1] == right {
                        syms[i] = merged.clone();
                        syms.remove(i + 1);
                    } else {
                        i += 1;
                    }
                }
            }
            push(&mut tokens, &mut seen, merged);
        }

        Vocab::from_tokens(tokens)
    }

    /// Greedy longest-match wordpiece tokenization. Every id is < `len()`;
    /// a word with no full piece cover becomes one `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in normalize(text).split_whitespace() {
            self.tokenize_word(word, &mut ids);
        }
        ids
    }

    fn tokenize_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut pieces = Vec::new();
        let mut pos = 0;
        while pos < word.len() {
            let rest = &word[pos..];
            let mut found = None;
            // Longest match wins; continuations require the ## form.
            for (end, _) in rest.char_indices().map(|(i, c)| (i + c.len_utf8(), c)) {
                let candidate = if pos == 0 {
                    rest[..end].to_string()
                } else {
                    format!("##{}", &rest[..end])
                };
                if let Some(id) = self.id(&candidate) {
                    found = Some((end, id));
                }
            }
            match found {
                Some((end, id)) => {
                    pieces.push(id);
                    pos += end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Inverse of `tokenize` up to whitespace collapse: pieces join with a
    /// space, `##` continuations attach without one, `[PAD]` is skipped.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id)?;
            if id == PAD {
                continue;
            }
            if let Some(cont) = tok.strip_prefix("##") {
                out.push_str(cont);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    /// One token per line; the line number (0-based) is the token id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens {
            let _ = writeln!(body, "{t}");
        }
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocab::from_tokens(tokens)
    }
}

fn normalize(text: &str) -> String {
    text.nfkc().collect()
}
