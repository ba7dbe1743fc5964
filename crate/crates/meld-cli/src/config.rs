//! The experiment file: one TOML document aggregating every stage's
//! configuration. Unknown keys anywhere in the tree are rejected, stage
//! seeds are derived from the single master seed, and the SHA-256 of the
//! resolved document identifies the run everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use meld_core::data::{SpecAugmentConfig, SynthSpec, SYNTH_SAMPLE_RATE_HZ};
use meld_core::dsp::MelConfig;
use meld_core::infer::GenerationConfig;
use meld_core::model::{ModelConfig, PostnetNorm};
use meld_core::objectives::LossWeights;
use meld_core::rng::sub_seed;
use meld_core::text::UnifiedVocab;
use meld_core::trainer::TrainConfig;

use crate::errors::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_utterances: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { n_utterances: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSection {
    /// Target vocabulary: 256 byte tokens plus merges. The trained model
    /// may come out smaller when the corpus runs out of pairs.
    pub target_vocab: usize,
}

impl Default for BpeSection {
    fn default() -> Self {
        Self { target_vocab: 280 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqSection {
    pub k: usize,
    pub tau: f64,
    pub kmeans_iters: usize,
    /// Frame subsample cap for the k-means fit.
    pub max_frames: usize,
}

impl Default for VqSection {
    fn default() -> Self {
        Self { k: 32, tau: 1.0, kmeans_iters: 50, max_frames: 20_000 }
    }
}

/// The model table omits `d_mel_in` and the vocabulary: both are derived
/// from the mel front end, the trained BPE, and the codebook at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub gmel_dropout: f64,
    pub max_seq_len: usize,
    pub postnet_channels: usize,
    pub postnet_norm: PostnetNorm,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ffn: 256,
            dropout: 0.1,
            gmel_dropout: 0.5,
            max_seq_len: 512,
            postnet_channels: 64,
            postnet_norm: PostnetNorm::Instance,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, d_mel_in: usize, vocab: UnifiedVocab) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            dropout: self.dropout,
            d_mel_in,
            vocab,
            gmel_dropout: self.gmel_dropout,
            max_seq_len: self.max_seq_len,
            postnet_channels: self.postnet_channels,
            postnet_norm: self.postnet_norm,
        }
    }

    /// Structural validation that does not need the derived fields.
    pub fn validate(&self) -> CliResult<()> {
        let probe = self.to_model_config(1, UnifiedVocab { v_text: 1, k_latent: 1 });
        probe.validate().map_err(CliError::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchingSection {
    pub max_frames_per_batch: usize,
}

impl Default for BatchingSection {
    fn default() -> Self {
        Self { max_frames_per_batch: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    /// How many manifest utterances the synthesize stage continues.
    pub n_utterances: usize,
    /// Also invert continuations to WAV via Griffin-Lim.
    pub emit_wav: bool,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self { n_utterances: 4, emit_wav: false }
    }
}

/// Artifact locations, all relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: String,
    pub features: String,
    pub bpe: String,
    pub codebook: String,
    pub checkpoints: String,
    pub synthesis: String,
    pub transcripts: String,
    pub eval: String,
    pub train_log: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            features: "features".into(),
            bpe: "bpe.json".into(),
            codebook: "codebook.json".into(),
            checkpoints: "checkpoints".into(),
            synthesis: "synthesis".into(),
            transcripts: "transcripts.jsonl".into(),
            eval: "eval.json".into(),
            train_log: "train_log.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it. `MELD_SEED`
    /// overrides it at load time.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub synth: SynthSpec,
    pub mel: MelConfig,
    pub bpe: BpeSection,
    pub vq: VqSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub batching: BatchingSection,
    pub augment: SpecAugmentConfig,
    pub loss: LossWeights,
    pub generation: GenerationConfig,
    pub synthesis: SynthesisSection,
    pub paths: PathsSection,
}

/// A parsed, override-applied, seed-resolved configuration plus its
/// canonical serialization and hash.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub snapshot: String,
}

impl Resolved {
    pub fn kmeans_seed(&self) -> u64 {
        sub_seed(self.cfg.seed, "kmeans", 0)
    }

    pub fn model_init_seed(&self) -> u64 {
        sub_seed(self.cfg.seed, "model-init", 0)
    }

    pub fn generation_seed_for(&self, utt_index: u64) -> u64 {
        sub_seed(self.cfg.generation.seed, "synthesize-utt", utt_index)
    }

    /// Seconds of audio per model frame (hop times stacking).
    pub fn frame_hop_seconds(&self) -> f64 {
        self.cfg.mel.hop_ms / 1000.0 * self.cfg.mel.stack_factor as f64
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for scalars; anything unparseable is a string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::validation(format!("override `{spec}` is not key=value")))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::validation(format!("override `{spec}` has an empty key segment")));
    }
    let mut table = root;
    for seg in &segments[..segments.len() - 1] {
        table = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::validation(format!("override `{spec}`: `{seg}` is not a table"))
            })?;
    }
    table.insert(segments[segments.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

fn validate(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.corpus.n_utterances == 0 {
        return Err(CliError::validation("corpus.n_utterances must be positive"));
    }
    cfg.synth.validate()?;
    cfg.mel.validate(SYNTH_SAMPLE_RATE_HZ)?;
    if cfg.bpe.target_vocab < 256 {
        return Err(CliError::validation(
            "bpe.target_vocab must cover the 256 byte tokens",
        ));
    }
    if cfg.vq.k == 0 || cfg.vq.kmeans_iters == 0 || cfg.vq.max_frames == 0 {
        return Err(CliError::validation("vq fields must be positive"));
    }
    if !(cfg.vq.tau > 0.0 && cfg.vq.tau.is_finite()) {
        return Err(CliError::validation("vq.tau must be positive"));
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.batching.max_frames_per_batch == 0 {
        return Err(CliError::validation("batching.max_frames_per_batch must be positive"));
    }
    cfg.augment.validate()?;
    cfg.generation.validate()?;
    if cfg.synthesis.n_utterances == 0 {
        return Err(CliError::validation("synthesis.n_utterances must be positive"));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse the config file, apply `--set` overrides, apply `MELD_SEED`,
/// derive stage seeds from the master seed, validate, and hash. Stage seed
/// values written in the file are intentionally overwritten so that one
/// master seed pins the whole experiment.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<Resolved> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
    resolve_config(&text, overrides)
}

pub fn resolve_config(text: &str, overrides: &[String]) -> CliResult<Resolved> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::validation(format!("config is not valid TOML: {e}")))?;
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let mut cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::validation(format!("config schema: {e}")))?;

    if let Ok(raw) = std::env::var("MELD_SEED") {
        cfg.seed = raw
            .parse()
            .map_err(|_| CliError::validation(format!("MELD_SEED `{raw}` is not a u64")))?;
    }
    // Derived seeds are embedded in the snapshot, so they must stay inside
    // TOML's signed integer range.
    let derived = |tag: &str| sub_seed(cfg.seed, tag, 0) & (i64::MAX as u64);
    cfg.synth.seed = derived("synth");
    cfg.train.seed = derived("train");
    cfg.generation.seed = derived("generation");

    validate(&cfg)?;

    let snapshot = toml::to_string_pretty(&cfg)
        .map_err(|e| CliError::runtime(format!("config serialization: {e}")))?;
    let hash = sha256_hex(snapshot.as_bytes());
    Ok(Resolved { cfg, hash, snapshot })
}
