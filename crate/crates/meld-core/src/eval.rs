//! Word error rate with an edit-type breakdown, plus a cheap spectral
//! similarity proxy for prompt continuation checks.
//!
//! WER runs on whitespace-split words after lowercasing and whitespace
//! collapse. The mel similarity is the cosine between concatenated per-bin
//! mean and standard-deviation vectors; it is a desk-scale stand-in for a
//! learned speaker-embedding similarity, not a replacement for one.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{MeldError, Result};
use crate::infer::DurationReport;

/// Edit counts from one alignment. `wer` is `(S + D + I) / n_ref_words` and
/// may exceed one when the hypothesis is much longer than the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref_words: usize,
}

impl WerBreakdown {
    pub fn total_edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn from_counts(s: usize, d: usize, i: usize, n_ref: usize) -> Self {
        Self {
            wer: (s + d + i) as f64 / n_ref as f64,
            substitutions: s,
            deletions: d,
            insertions: i,
            n_ref_words: n_ref,
        }
    }
}

/// Lowercase and collapse runs of whitespace to single spaces.
pub fn normalize_text(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn words(text: &str) -> Vec<String> {
    normalize_text(text).split_whitespace().map(str::to_owned).collect()
}

/// Word error rate of `hypothesis` against `reference` via Levenshtein
/// alignment with unit costs. Backtrace ties resolve substitution first,
/// then insertion, then deletion, so the breakdown is deterministic.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r = words(reference);
    let h = words(hypothesis);
    if r.is_empty() {
        return Err(MeldError::InvalidData("empty reference transcript".into()));
    }
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            d[i][j] = if r[i - 1] == h[j - 1] {
                d[i - 1][j - 1]
            } else {
                (d[i - 1][j - 1] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j] + 1)
            };
        }
    }

    let (mut s, mut del, mut ins) = (0usize, 0usize, 0usize);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && r[i - 1] == h[j - 1] && d[i][j] == d[i - 1][j - 1] {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            s += 1;
            i -= 1;
            j -= 1;
        } else if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            ins += 1;
            j -= 1;
        } else {
            del += 1;
            i -= 1;
        }
    }
    Ok(WerBreakdown::from_counts(s, del, ins, n))
}

/// Pooled WER: edit and reference-word counts are summed over all pairs
/// before dividing, so every reference word carries equal weight.
pub fn corpus_wer(pairs: &[(String, String)]) -> Result<WerBreakdown> {
    if pairs.is_empty() {
        return Err(MeldError::InvalidData("corpus_wer needs at least one pair".into()));
    }
    let (mut s, mut d, mut i, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (reference, hypothesis) in pairs {
        let b = wer(reference, hypothesis)?;
        s += b.substitutions;
        d += b.deletions;
        i += b.insertions;
        n += b.n_ref_words;
    }
    Ok(WerBreakdown::from_counts(s, d, i, n))
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MeldError::InvalidData(
            "mel statistics have zero norm; cosine undefined".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the two segments' spectral statistics: per-bin
/// means and per-bin population standard deviations, concatenated. A proxy
/// for speaker similarity on the synthetic corpus only; it measures
/// long-term spectral shape, nothing more.
pub fn mel_stat_similarity(prompt: ArrayView2<f64>, continuation: ArrayView2<f64>) -> Result<f64> {
    for (name, seg) in [("prompt", &prompt), ("continuation", &continuation)] {
        if seg.nrows() == 0 || seg.ncols() == 0 {
            return Err(MeldError::InvalidData(format!("{name} segment is empty")));
        }
    }
    if prompt.ncols() != continuation.ncols() {
        return Err(MeldError::ShapeMismatch(format!(
            "segment widths differ: {} vs {}",
            prompt.ncols(),
            continuation.ncols()
        )));
    }
    let stats = |seg: &ArrayView2<f64>| -> Vec<f64> {
        let t = seg.nrows() as f64;
        let mut v = Vec::with_capacity(2 * seg.ncols());
        for col in seg.columns() {
            v.push(col.sum() / t);
        }
        for (bin, col) in seg.columns().into_iter().enumerate() {
            let mean = v[bin];
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t;
            v.push(var.sqrt());
        }
        v
    };
    cosine(&stats(&prompt), &stats(&continuation))
}

/// One evaluated utterance in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEval {
    pub utt_id: String,
    pub reference: String,
    pub hypothesis: String,
    pub breakdown: WerBreakdown,
}

/// Corpus evaluation artifact: per-utterance breakdowns, the pooled
/// summary, and optional generation-side accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_utterance: Vec<UtteranceEval>,
    pub pooled: WerBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<DurationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mel_similarity: Option<f64>,
}

impl EvalReport {
    /// Build from `(utt_id, reference, hypothesis)` rows.
    pub fn from_rows(rows: &[(String, String, String)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(MeldError::InvalidData("evaluation needs at least one utterance".into()));
        }
        let mut per_utterance = Vec::with_capacity(rows.len());
        for (utt_id, reference, hypothesis) in rows {
            per_utterance.push(UtteranceEval {
                utt_id: utt_id.clone(),
                reference: reference.clone(),
                hypothesis: hypothesis.clone(),
                breakdown: wer(reference, hypothesis)?,
            });
        }
        let pairs: Vec<(String, String)> = rows
            .iter()
            .map(|(_, r, h)| (r.clone(), h.clone()))
            .collect();
        Ok(Self {
            per_utterance,
            pooled: corpus_wer(&pairs)?,
            duration: None,
            mel_similarity: None,
        })
    }
}
