//! Decoding-time sampling controls: top-k and nucleus (top-p) filtering,
//! the additive repetition penalty, and the per-generation trace record.
//!
//! Filtering order is fixed: top-k prunes by raw logit first, then top-p
//! selects the minimal high-probability prefix of the renormalized
//! distribution. The two orders give different candidate sets, so the
//! choice is part of the contract (see `order_is_top_k_then_top_p`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeldError, Result};
use crate::model::Mode;
use crate::text::UnifiedVocab;

/// Decoding configuration. Reference values: top-k 60, top-p 0.9, additive
/// repetition penalty -1, beam size 5. `max_frames` defaults to 625 frames,
/// ten seconds at the 62.5 Hz frame rate of the 16 ms hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub mode: Mode,
    pub top_k: usize,
    pub top_p: f64,
    pub repetition_penalty_on: bool,
    pub rep_penalty_value: f64,
    pub max_frames: usize,
    pub beam_size: usize,
    /// Keep g_Mel dropout active while decoding TTS; diversity knob.
    pub test_time_gmel_dropout: bool,
    /// Replace the sampled codeword with the zero vector in SpecNet
    /// (the "without z_t" ablation).
    pub ablate_zero_codeword: bool,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tts,
            top_k: 60,
            top_p: 0.9,
            repetition_penalty_on: true,
            rep_penalty_value: -1.0,
            max_frames: 625,
            beam_size: 5,
            test_time_gmel_dropout: true,
            ablate_zero_codeword: false,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    /// STT preset: beam decoding with g_Mel dropout deactivated.
    pub fn stt(seed: u64) -> Self {
        Self {
            mode: Mode::Stt,
            test_time_gmel_dropout: false,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(MeldError::Config(format!(
                "top_p {} not in (0, 1]",
                self.top_p
            )));
        }
        if self.top_k == 0 {
            return Err(MeldError::Config("top_k must be at least 1".into()));
        }
        if self.max_frames == 0 {
            return Err(MeldError::Config("max_frames must be positive".into()));
        }
        if self.beam_size == 0 {
            return Err(MeldError::Config("beam_size must be at least 1".into()));
        }
        if !self.rep_penalty_value.is_finite() {
            return Err(MeldError::Config("rep_penalty_value must be finite".into()));
        }
        Ok(())
    }
}

/// Outcome of top-k/top-p filtering over one logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredDistribution {
    /// Renormalized probabilities, same length as the input logits, zero
    /// outside the candidate set.
    pub probs: Vec<f64>,
    /// Candidate indices, ascending.
    pub candidates: Vec<usize>,
}

/// Keep the `top_k` entries by logit, softmax over the survivors, then keep
/// the minimal prefix (by descending probability) whose cumulative mass
/// reaches `top_p`, and renormalize over that prefix. Ties in logit order
/// break toward the lower index.
pub fn filter_top_k_top_p(logits: &[f64], top_k: usize, top_p: f64) -> FilteredDistribution {
    assert!(!logits.is_empty(), "empty logit vector");
    assert!(top_k >= 1, "top_k must be at least 1");
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must lie in (0, 1]");
    debug_assert!(logits.iter().all(|v| v.is_finite()), "non-finite logit");

    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top_k.min(logits.len()));

    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    // Minimal prefix with cumulative mass >= top_p; the tolerance absorbs
    // rounding when the exact mass lands on the threshold.
    let mut cut = order.len();
    let mut cum = 0.0;
    for (rank, w) in weights.iter().enumerate() {
        cum += w / total;
        if cum >= top_p - 1e-12 {
            cut = rank + 1;
            break;
        }
    }

    let mass: f64 = weights[..cut].iter().sum();
    let mut probs = vec![0.0; logits.len()];
    for (rank, &i) in order[..cut].iter().enumerate() {
        probs[i] = weights[rank] / mass;
    }
    let mut candidates = order[..cut].to_vec();
    candidates.sort_unstable();
    FilteredDistribution { probs, candidates }
}

/// Add `penalty` to the score of every code in the previous step's top-p
/// candidate set. The end-of-sequence entry is exempt so the penalty cannot
/// suppress termination. Applied per step: a code staying in consecutive
/// candidate sets is penalized once per step, not cumulatively latched.
pub fn apply_repetition_penalty(
    logits: &mut [f64],
    previous_candidates: &[usize],
    eos_index: usize,
    penalty: f64,
) {
    for &c in previous_candidates {
        if c != eos_index {
            logits[c] += penalty;
        }
    }
}

/// Inverse-CDF draw from a probability vector. Zero-probability entries are
/// never chosen; rounding in the final bin falls back to the last positive
/// entry.
pub fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// Why a generation loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxFrames,
}

/// Compact per-step diagnostics kept in the trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    /// Largest masked logit after the repetition penalty.
    pub max_logit: f64,
    /// Logit of the sampled entry on the same scale.
    pub chosen_logit: f64,
    /// Entropy (nats) of the renormalized candidate distribution.
    pub candidate_entropy: f64,
}

/// One decoding step: the sampled vocabulary id, the top-p candidate set
/// (global ids, ascending), and a logits summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub sampled_id: usize,
    pub candidates: Vec<usize>,
    pub summary: StepSummary,
}

/// Record of one autoregressive generation. Steps list every sampled token
/// including a terminal end-of-sequence draw, so the step count equals the
/// emitted frame count plus one when termination was `Eos`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub steps: Vec<TraceStep>,
    pub termination: Termination,
}

impl GenerationTrace {
    /// Number of mel frames the trace accounts for.
    pub fn n_frames(&self) -> usize {
        match self.termination {
            Termination::Eos => self.steps.len().saturating_sub(1),
            Termination::MaxFrames => self.steps.len(),
        }
    }

    /// Structural checks: every non-terminal step sampled a latent id, an
    /// `Eos` termination ends on the end-of-sequence id, and candidate sets
    /// are non-empty, strictly ascending, and stay inside latents plus
    /// end-of-sequence.
    pub fn validate(&self, vocab: &UnifiedVocab) -> Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            let terminal = t + 1 == self.steps.len() && self.termination == Termination::Eos;
            let ok_id = if terminal {
                step.sampled_id == vocab.id_eos()
            } else {
                vocab.is_latent(step.sampled_id)
            };
            if !ok_id {
                return Err(MeldError::InvalidData(format!(
                    "trace step {t} sampled unexpected id {}",
                    step.sampled_id
                )));
            }
            if step.candidates.is_empty() {
                return Err(MeldError::InvalidData(format!(
                    "trace step {t} has an empty candidate set"
                )));
            }
            if !step.candidates.windows(2).all(|w| w[0] < w[1]) {
                return Err(MeldError::InvalidData(format!(
                    "trace step {t} candidates not strictly ascending"
                )));
            }
            for &c in &step.candidates {
                if !(vocab.is_latent(c) || c == vocab.id_eos()) {
                    return Err(MeldError::InvalidData(format!(
                        "trace step {t} candidate {c} outside latents and eos"
                    )));
                }
            }
            if !step.candidates.contains(&step.sampled_id) {
                return Err(MeldError::InvalidData(format!(
                    "trace step {t} sampled outside its candidate set"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::text::make_unified_vocab;

    fn from_probs(probs: &[f64]) -> Vec<f64> {
        probs.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn config_defaults_and_invariants() {
        let cfg = GenerationConfig::default();
        assert_eq!(cfg.top_k, 60);
        assert_eq!(cfg.top_p, 0.9);
        assert_eq!(cfg.rep_penalty_value, -1.0);
        assert_eq!(cfg.beam_size, 5);
        assert!(cfg.repetition_penalty_on);
        assert!(cfg.test_time_gmel_dropout);
        cfg.validate().unwrap();

        let stt = GenerationConfig::stt(7);
        assert_eq!(stt.mode, Mode::Stt);
        assert!(!stt.test_time_gmel_dropout);
        stt.validate().unwrap();

        for bad in [
            GenerationConfig { top_p: 0.0, ..Default::default() },
            GenerationConfig { top_p: 1.5, ..Default::default() },
            GenerationConfig { top_k: 0, ..Default::default() },
            GenerationConfig { max_frames: 0, ..Default::default() },
            GenerationConfig { beam_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(GenerationConfig { top_p: 1.0, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn nucleus_prefix_example() {
        let f = filter_top_k_top_p(&from_probs(&[0.5, 0.3, 0.15, 0.05]), 60, 0.9);
        assert_eq!(f.candidates, vec![0, 1, 2]);
        let mass = 0.95;
        for (i, want) in [0.5, 0.3, 0.15].iter().enumerate() {
            assert!((f.probs[i] - want / mass).abs() < 1e-12);
        }
        assert_eq!(f.probs[3], 0.0);
    }

    #[test]
    fn full_mass_full_k_is_identity() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let f = filter_top_k_top_p(&logits, logits.len(), 1.0);
        assert_eq!(f.candidates, vec![0, 1, 2, 3]);
        let max = 2.0;
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (i, &l) in logits.iter().enumerate() {
            assert!((f.probs[i] - (l - max).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn k_one_is_argmax_regardless_of_p() {
        let f = filter_top_k_top_p(&[0.1, 3.0, 2.9], 1, 0.01);
        assert_eq!(f.candidates, vec![1]);
        assert_eq!(f.probs, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn ties_break_toward_lower_id() {
        // Indices 0 and 1 tie; k=2 keeps both, a tiny p keeps only the first.
        let f = filter_top_k_top_p(&[1.0, 1.0, 0.0], 2, 0.01);
        assert_eq!(f.candidates, vec![0]);
        // With the tie at the k boundary, the lower id survives.
        let g = filter_top_k_top_p(&[0.0, 1.0, 1.0, 1.0], 2, 1.0);
        assert_eq!(g.candidates, vec![1, 2]);
    }

    #[test]
    fn order_is_top_k_then_top_p() {
        // probs [0.4, 0.3, 0.2, 0.1]: filtering by p=0.75 first would keep
        // {0,1,2}; k=3 first renormalizes to [4/9, 3/9, 2/9] whose 0.75
        // prefix is {0,1}.
        let f = filter_top_k_top_p(&from_probs(&[0.4, 0.3, 0.2, 0.1]), 3, 0.75);
        assert_eq!(f.candidates, vec![0, 1]);
    }

    #[test]
    fn candidate_set_is_minimal() {
        let mut rng = stream(11, "sampling-minimal", 0);
        for case in 0..1000 {
            let n = rng.random_range(2..40);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let k = rng.random_range(1..=n);
            let p: f64 = rng.random_range(0.05..1.0);
            let f = filter_top_k_top_p(&logits, k, p);
            assert!(!f.candidates.is_empty());
            let sum: f64 = f.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "case {case}: probs sum {sum}");
            assert!(f.candidates.len() <= k);
            // Cumulative mass of the set reaches p in the kept softmax and
            // dropping its least likely member falls below p.
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            order.truncate(k);
            let z: f64 = order.iter().map(|&i| (logits[i] - max).exp()).sum();
            let set_mass: f64 = f
                .candidates
                .iter()
                .map(|&i| (logits[i] - max).exp() / z)
                .sum();
            assert!(set_mass >= p - 1e-9, "case {case}: mass {set_mass} < {p}");
            if f.candidates.len() > 1 {
                let weakest = *f
                    .candidates
                    .iter()
                    .min_by(|&&a, &&b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                    .unwrap();
                let reduced = set_mass - (logits[weakest] - max).exp() / z;
                assert!(reduced < p, "case {case}: set not minimal");
            }
        }
    }

    #[test]
    fn repetition_penalty_rules() {
        let base = vec![2.0, 0.5, -1.0, 3.0];
        let eos = 3;

        let mut id = base.clone();
        apply_repetition_penalty(&mut id, &[], eos, -1.0);
        assert_eq!(id, base);

        let mut once = base.clone();
        apply_repetition_penalty(&mut once, &[0, 3], eos, -1.0);
        assert_eq!(once, vec![1.0, 0.5, -1.0, 3.0]);

        apply_repetition_penalty(&mut once, &[0, 3], eos, -1.0);
        assert_eq!(once, vec![0.0, 0.5, -1.0, 3.0]);
    }

    #[test]
    fn sample_index_follows_cdf() {
        let mut rng = stream(13, "sampling-draw", 0);
        assert_eq!(sample_index(&[0.0, 1.0, 0.0], &mut rng), 1);

        let probs = [0.25, 0.0, 0.75];
        let mut hits = [0usize; 3];
        let n = 20_000;
        for _ in 0..n {
            hits[sample_index(&probs, &mut rng)] += 1;
        }
        assert_eq!(hits[1], 0);
        // 3 sigma of Binomial(20000, 0.25).
        let expected = 0.25 * n as f64;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        assert!((hits[0] as f64 - expected).abs() < 3.0 * sigma);
    }

    #[test]
    fn trace_accounting_and_validation() {
        let vocab = make_unified_vocab(4, 3).unwrap();
        let lat = |k: usize| vocab.latent_id(k);
        let step = |id: usize, cands: Vec<usize>| TraceStep {
            sampled_id: id,
            candidates: cands,
            summary: StepSummary { max_logit: 0.0, chosen_logit: 0.0, candidate_entropy: 0.0 },
        };

        let eos_trace = GenerationTrace {
            steps: vec![
                step(lat(0), vec![lat(0), lat(2)]),
                step(vocab.id_eos(), vec![lat(1), vocab.id_eos()]),
            ],
            termination: Termination::Eos,
        };
        assert_eq!(eos_trace.n_frames(), 1);
        eos_trace.validate(&vocab).unwrap();

        let capped = GenerationTrace {
            steps: vec![step(lat(1), vec![lat(1)]), step(lat(1), vec![lat(1)])],
            termination: Termination::MaxFrames,
        };
        assert_eq!(capped.n_frames(), 2);
        capped.validate(&vocab).unwrap();

        let text_leak = GenerationTrace {
            steps: vec![step(0, vec![0])],
            termination: Termination::MaxFrames,
        };
        assert!(text_leak.validate(&vocab).is_err());

        let off_set = GenerationTrace {
            steps: vec![step(lat(0), vec![lat(1)])],
            termination: Termination::MaxFrames,
        };
        assert!(off_set.validate(&vocab).is_err());
    }

    #[test]
    fn trace_serde_round_trip() {
        let trace = GenerationTrace {
            steps: vec![TraceStep {
                sampled_id: 9,
                candidates: vec![7, 9],
                summary: StepSummary {
                    max_logit: 1.25,
                    chosen_logit: 0.5,
                    candidate_entropy: 0.69,
                },
            }],
            termination: Termination::Eos,
        };
        let json = serde_json::to_string(&trace).unwrap();
        let back: GenerationTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, trace);
    }
}
