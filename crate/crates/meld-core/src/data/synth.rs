//! Deterministic synthetic speech corpus. Each word of a small vocabulary is
//! a fixed sequence of pure tones; a speaker is a constant pitch offset added
//! to every tone. The mapping from (transcript, speaker) to waveform is a
//! pure function of the spec, so corpora regenerate bit-identically.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, write_wav, WaveBuffer};
use crate::error::{MeldError, Result};

/// All synthetic audio is generated at this rate.
pub const SYNTH_SAMPLE_RATE_HZ: u32 = 16_000;

/// Spacing between consecutive assigned tone frequencies.
pub const TONE_STEP_HZ: f64 = 60.0;

/// Highest tone frequency the generator will assign. Kept inside the default
/// mel analysis band (80-7600 Hz) with margin for speaker offsets.
pub const MAX_TONE_HZ: f64 = 7200.0;

/// Silence between words, as a fraction of `tone_dur_ms`.
const GAP_RATIO: f64 = 0.5;

/// Linear fade applied at tone edges to avoid clicks.
const RAMP_MS: f64 = 5.0;

const TONE_AMPLITUDE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub word_vocab_size: usize,
    pub tones_per_word: usize,
    pub base_f0_hz: f64,
    /// One entry per speaker; all tones of that speaker shift by this much.
    pub speaker_offsets_hz: Vec<f64>,
    pub tone_dur_ms: f64,
    /// Inclusive (min, max) words per utterance.
    pub utterance_len_words: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            word_vocab_size: 16,
            tones_per_word: 2,
            base_f0_hz: 220.0,
            speaker_offsets_hz: vec![0.0, 30.0],
            tone_dur_ms: 80.0,
            utterance_len_words: (2, 5),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.word_vocab_size == 0
            || self.tones_per_word == 0
            || self.base_f0_hz <= 0.0
            || self.tone_dur_ms <= 0.0
            || self.speaker_offsets_hz.is_empty()
        {
            return Err(MeldError::Config(
                "synth spec fields must be positive and non-empty".into(),
            ));
        }
        let (lo, hi) = self.utterance_len_words;
        if lo == 0 || hi < lo {
            return Err(MeldError::Config(format!(
                "utterance_len_words ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        for (i, a) in self.speaker_offsets_hz.iter().enumerate() {
            if !a.is_finite() {
                return Err(MeldError::Config("non-finite speaker offset".into()));
            }
            for b in &self.speaker_offsets_hz[i + 1..] {
                if a == b {
                    return Err(MeldError::Config(format!(
                        "speaker offsets must be distinct, {a} repeats"
                    )));
                }
            }
        }
        let max_offset = self
            .speaker_offsets_hz
            .iter()
            .fold(0.0f64, |m, &o| m.max(o));
        let top = self.highest_base_tone_hz() + max_offset;
        if top > MAX_TONE_HZ {
            return Err(MeldError::Config(format!(
                "vocabulary needs tones up to {top:.0} Hz, above the {MAX_TONE_HZ:.0} Hz cap; \
                 shrink word_vocab_size or tones_per_word"
            )));
        }
        Ok(())
    }

    fn highest_base_tone_hz(&self) -> f64 {
        let n_tones = self.word_vocab_size * self.tones_per_word;
        self.base_f0_hz + TONE_STEP_HZ * (n_tones - 1) as f64
    }

    pub fn n_speakers(&self) -> usize {
        self.speaker_offsets_hz.len()
    }

    /// Word symbol used in transcripts.
    pub fn word_symbol(word: usize) -> String {
        format!("w{word}")
    }

    pub fn parse_word_symbol(&self, sym: &str) -> Result<usize> {
        let idx: usize = sym
            .strip_prefix('w')
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| MeldError::InvalidData(format!("not a word symbol: {sym:?}")))?;
        if idx >= self.word_vocab_size {
            return Err(MeldError::InvalidData(format!(
                "word index {idx} outside vocabulary of {}",
                self.word_vocab_size
            )));
        }
        Ok(idx)
    }

    /// The tone sequence of `word` for speaker 0, in playback order.
    pub fn word_frequencies(&self, word: usize) -> Vec<f64> {
        assert!(word < self.word_vocab_size, "word index out of range");
        (0..self.tones_per_word)
            .map(|j| self.base_f0_hz + TONE_STEP_HZ * (word * self.tones_per_word + j) as f64)
            .collect()
    }

    pub fn tone_samples(&self) -> usize {
        (self.tone_dur_ms * SYNTH_SAMPLE_RATE_HZ as f64 / 1000.0).round() as usize
    }

    pub fn gap_samples(&self) -> usize {
        (self.tone_dur_ms * GAP_RATIO * SYNTH_SAMPLE_RATE_HZ as f64 / 1000.0).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub wave: WaveBuffer,
    pub speaker_id: usize,
}

/// Render one transcript for one speaker. Pure in (spec, transcript,
/// speaker): no randomness enters the waveform.
pub fn synthesize_utterance(spec: &SynthSpec, transcript: &str, speaker_id: usize) -> Result<WaveBuffer> {
    spec.validate()?;
    if speaker_id >= spec.n_speakers() {
        return Err(MeldError::InvalidData(format!(
            "speaker {speaker_id} outside {} speakers",
            spec.n_speakers()
        )));
    }
    let offset = spec.speaker_offsets_hz[speaker_id];
    let tone_n = spec.tone_samples();
    let gap_n = spec.gap_samples();
    let ramp_n = ((RAMP_MS * SYNTH_SAMPLE_RATE_HZ as f64 / 1000.0) as usize).min(tone_n / 2);
    let words: Vec<usize> = transcript
        .split_whitespace()
        .map(|sym| spec.parse_word_symbol(sym))
        .collect::<Result<_>>()?;
    if words.is_empty() {
        return Err(MeldError::EmptyInput("transcript with no words".into()));
    }
    let mut samples = Vec::new();
    for (wi, &word) in words.iter().enumerate() {
        if wi > 0 {
            samples.extend(std::iter::repeat(0.0).take(gap_n));
        }
        for f0 in spec.word_frequencies(word) {
            let f = f0 + offset;
            for n in 0..tone_n {
                let env = if n < ramp_n {
                    n as f64 / ramp_n as f64
                } else if n + ramp_n >= tone_n {
                    (tone_n - n) as f64 / ramp_n as f64
                } else {
                    1.0
                };
                let t = n as f64 / SYNTH_SAMPLE_RATE_HZ as f64;
                samples.push(TONE_AMPLITUDE * env * (std::f64::consts::TAU * f * t).sin());
            }
        }
    }
    WaveBuffer::new(samples, SYNTH_SAMPLE_RATE_HZ)
}

/// Draw `n_utterances` transcripts and speakers from the spec's seed and
/// render them. Utterance `i` depends only on (spec, i).
pub fn generate_corpus(spec: &SynthSpec, n_utterances: usize) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if n_utterances == 0 {
        return Err(MeldError::EmptyInput("n_utterances must be > 0".into()));
    }
    let mut out = Vec::with_capacity(n_utterances);
    for i in 0..n_utterances {
        let mut rng = crate::rng::stream(spec.seed, "synth-utt", i as u64);
        let (lo, hi) = spec.utterance_len_words;
        let n_words = rng.random_range(lo..=hi);
        let words: Vec<String> = (0..n_words)
            .map(|_| SynthSpec::word_symbol(rng.random_range(0..spec.word_vocab_size)))
            .collect();
        let transcript = words.join(" ");
        let speaker_id = rng.random_range(0..spec.n_speakers());
        let wave = synthesize_utterance(spec, &transcript, speaker_id)?;
        out.push(Utterance {
            id: format!("utt-{i:05}"),
            transcript,
            wave,
            speaker_id,
        });
    }
    Ok(out)
}

/// One line of the corpus manifest. `wav` is relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub transcript: String,
    pub wav: String,
    pub speaker_id: usize,
}

/// Write WAVs plus a JSON-lines manifest under `dir`; returns the manifest
/// path.
pub fn write_corpus(dir: &Path, utterances: &[Utterance]) -> Result<PathBuf> {
    if utterances.is_empty() {
        return Err(MeldError::EmptyInput("no utterances to write".into()));
    }
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest_path)?;
    for u in utterances {
        let rel = format!("wav/{}.wav", u.id);
        write_wav(&dir.join(&rel), &u.wave)?;
        let entry = ManifestEntry {
            id: u.id.clone(),
            transcript: u.transcript.clone(),
            wav: rel,
            speaker_id: u.speaker_id,
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    Ok(manifest_path)
}

pub fn read_manifest(manifest_path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(manifest_path)?;
    let mut entries = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            MeldError::InvalidData(format!("manifest line {}: {e}", ln + 1))
        })?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(MeldError::EmptyInput("manifest has no entries".into()));
    }
    Ok(entries)
}

/// Load the waveform of a manifest entry, resolving its relative path.
pub fn load_entry_wave(manifest_path: &Path, entry: &ManifestEntry) -> Result<WaveBuffer> {
    let base = manifest_path
        .parent()
        .ok_or_else(|| MeldError::Io(std::io::Error::other("manifest has no parent dir")))?;
    read_wav(&base.join(&entry.wav))
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
