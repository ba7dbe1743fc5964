//! Byte-level byte-pair encoding.
//!
//! The base alphabet is all 256 byte values, so any input encodes without
//! out-of-vocabulary handling and decode(encode(s)) = s for every byte
//! string. Training greedily merges the most frequent adjacent pair; ties
//! break toward the lexicographically smallest pair of token byte strings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MeldError, Result};

/// A trained BPE model: the ordered merge list plus the derived token table.
/// Token id i is the byte string `tokens[i]`; ids are dense in `[0, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeModel {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
}

impl BpeModel {
    /// Base model with the 256 single-byte tokens and no merges.
    pub fn byte_base() -> Self {
        Self {
            tokens: (0u16..256).map(|b| vec![b as u8]).collect(),
            merges: Vec::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    /// Encode a byte string by replaying the merges in training order.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut seq: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        for (idx, &(a, b)) in self.merges.iter().enumerate() {
            let new_id = 256 + idx as u32;
            seq = apply_merge(&seq, a, b, new_id);
        }
        seq
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token_bytes(id).ok_or_else(|| {
                MeldError::Tokenizer(format!(
                    "id {id} out of range for vocab of {}",
                    self.vocab_size()
                ))
            })?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes)
            .map_err(|e| MeldError::Tokenizer(format!("decoded bytes are not UTF-8: {e}")))
    }
}

/// Replace every non-overlapping adjacent `(a, b)` with `new_id`, scanning
/// left to right.
fn apply_merge(seq: &[u32], a: u32, b: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Train a BPE model on `corpus` lines until the vocabulary reaches
/// `target_vocab` or no adjacent pair occurs at least twice.
pub fn train_bpe(corpus: &[String], target_vocab: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(MeldError::EmptyInput("empty BPE training corpus".into()));
    }
    if target_vocab < 256 {
        return Err(MeldError::Config(format!(
            "target vocab {target_vocab} smaller than the 256-byte base alphabet"
        )));
    }
    let mut model = BpeModel::byte_base();
    let mut seqs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|line| line.as_bytes().iter().map(|&b| b as u32).collect())
        .collect();
    while model.vocab_size() < target_vocab {
        // Count left-to-right non-overlapping occurrences so counts agree
        // with what apply_merge would actually replace.
        let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for seq in &seqs {
            let mut i = 0;
            while i + 1 < seq.len() {
                let pair = (seq[i], seq[i + 1]);
                *counts.entry(pair).or_insert(0) += 1;
                i += if i + 2 < seq.len() && seq[i + 1] == seq[i + 2] && seq[i] == seq[i + 1] {
                    2
                } else {
                    1
                };
            }
        }
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Higher count wins; on ties prefer the lexicographically
                    // smaller pair of byte strings, so compare reversed.
                    let ka = (&model.tokens[pa.0 as usize], &model.tokens[pa.1 as usize]);
                    let kb = (&model.tokens[pb.0 as usize], &model.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some((a, b)) = best else { break };
        let new_id = model.tokens.len() as u32;
        let mut merged = model.tokens[a as usize].clone();
        merged.extend_from_slice(&model.tokens[b as usize]);
        model.tokens.push(merged);
        model.merges.push((a, b));
        for seq in &mut seqs {
            *seq = apply_merge(seq, a, b, new_id);
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

/// Escape a token byte string into printable ASCII: backslash doubles,
/// printable bytes pass through, the rest become `\xNN`.
fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s
}

fn unescape_bytes(s: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            if !c.is_ascii() || (c as u32) < 0x20 || (c as u32) > 0x7e {
                return Err(MeldError::Tokenizer(format!(
                    "unescaped non-printable char in token string {s:?}"
                )));
            }
            out.push(c as u8);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push(b'\\'),
            Some('x') => {
                let hi = chars.next();
                let lo = chars.next();
                let (Some(hi), Some(lo)) = (hi, lo) else {
                    return Err(MeldError::Tokenizer(format!("truncated escape in {s:?}")));
                };
                let byte = u8::from_str_radix(&format!("{hi}{lo}"), 16)
                    .map_err(|_| MeldError::Tokenizer(format!("bad hex escape in {s:?}")))?;
                out.push(byte);
            }
            other => {
                return Err(MeldError::Tokenizer(format!(
                    "bad escape {other:?} in token string {s:?}"
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct BpeFile {
    merges: Vec<(String, String)>,
    vocab: BTreeMap<String, u32>,
}

pub fn save_bpe(path: &Path, model: &BpeModel) -> Result<()> {
    let merges = model
        .merges
        .iter()
        .map(|&(a, b)| {
            (
                escape_bytes(&model.tokens[a as usize]),
                escape_bytes(&model.tokens[b as usize]),
            )
        })
        .collect();
    let vocab = model
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (escape_bytes(t), i as u32))
        .collect();
    let file = BpeFile { merges, vocab };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_bpe(path: &Path) -> Result<BpeModel> {
    let json = std::fs::read_to_string(path)?;
    let file: BpeFile = serde_json::from_str(&json)?;
    let v = file.vocab.len();
    let mut tokens: Vec<Option<Vec<u8>>> = vec![None; v];
    let mut by_bytes: BTreeMap<Vec<u8>, u32> = BTreeMap::new();
    for (s, id) in &file.vocab {
        let bytes = unescape_bytes(s)?;
        let slot = tokens
            .get_mut(*id as usize)
            .ok_or_else(|| MeldError::Tokenizer(format!("vocab id {id} not dense in [0, {v})")))?;
        if slot.is_some() {
            return Err(MeldError::Tokenizer(format!("duplicate vocab id {id}")));
        }
        *slot = Some(bytes.clone());
        by_bytes.insert(bytes, *id);
    }
    let tokens: Vec<Vec<u8>> = tokens
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| MeldError::Tokenizer(format!("missing vocab id {i}"))))
        .collect::<Result<_>>()?;
    for (i, tok) in tokens.iter().enumerate().take(256) {
        if tok != &vec![i as u8] {
            return Err(MeldError::Tokenizer(format!(
                "token id {i} is not the base byte {i}"
            )));
        }
    }
    let mut merges = Vec::with_capacity(file.merges.len());
    for (idx, (sa, sb)) in file.merges.iter().enumerate() {
        let a = *by_bytes.get(&unescape_bytes(sa)?).ok_or_else(|| {
            MeldError::Tokenizer(format!("merge {idx} references unknown token {sa:?}"))
        })?;
        let b = *by_bytes.get(&unescape_bytes(sb)?).ok_or_else(|| {
            MeldError::Tokenizer(format!("merge {idx} references unknown token {sb:?}"))
        })?;
        let expect: Vec<u8> = [tokens[a as usize].clone(), tokens[b as usize].clone()].concat();
        let got = &tokens[256 + idx];
        if got != &expect {
            return Err(MeldError::Tokenizer(format!(
                "merge {idx} product mismatch: {:?} vs {:?}",
                escape_bytes(got),
                escape_bytes(&expect)
            )));
        }
        merges.push((a, b));
    }
    if 256 + merges.len() != tokens.len() {
        return Err(MeldError::Tokenizer(format!(
            "vocab has {} tokens but merges imply {}",
            tokens.len(),
            256 + merges.len()
        )));
    }
    Ok(BpeModel { tokens, merges })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
