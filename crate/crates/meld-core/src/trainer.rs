//! Optimization loop: trapezoidal learning-rate schedule, per-batch mode
//! curriculum, global-norm gradient clipping, Adam, CSV logging, and
//! checkpoint cadence with bit-exact resume.
//!
//! Determinism. Every stochastic draw of step `s` comes from
//! `rng::stream(cfg.seed, "train-step", s)` and the batch stream for epoch
//! `e` from a sub-seed of `(cfg.seed, e)`, so no generator state needs to be
//! serialized: a resumed run replays the batch cursor structurally and then
//! reproduces the uninterrupted run bit for bit.
//!
//! Joint mode draws each batch's task by a fair coin after an initial
//! TTS-only phase of `tts_pretrain_steps`; the optimizer state carries over
//! into the mixed phase (the alternative, resetting it, is not used). Since
//! gradient maps are complete (absent gradients materialize as zeros), Adam
//! momentum keeps decaying parameters that a mode does not touch, matching
//! the usual framework semantics.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape};
use crate::data::{make_batches, spec_augment, Batch, EncodedUtterance, ModeMix, SpecAugmentConfig};
use crate::error::{MeldError, Result};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{MeldModel, Mode};
use crate::objectives::{pool_reports, stt_loss, tts_loss, ItemLoss, LossReport, LossWeights};
use crate::vq::Codebook;

/// Appendix-scale reference schedule, recorded for the shape test.
pub const PAPER_WARMUP_STEPS: usize = 1_000;
pub const PAPER_PEAK_LR: f64 = 5e-4;
pub const PAPER_HOLD_STEPS: usize = 100_000;
pub const PAPER_DECAY_STEPS: usize = 100_000;
pub const PAPER_GRAD_CLIP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub hold_steps: usize,
    pub decay_steps: usize,
    pub grad_clip: f64,
    pub mode: ModeMix,
    /// Joint mode only: batches are forced to TTS for this many initial
    /// steps before the coin flip starts.
    pub tts_pretrain_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(ModeMix::Joint)
    }
}

impl TrainConfig {
    /// Desk-scale default: the paper schedule shape at 1% scale.
    pub fn desk(mode: ModeMix) -> Self {
        Self {
            total_steps: 2_000,
            warmup_steps: 200,
            peak_lr: PAPER_PEAK_LR,
            hold_steps: 1_000,
            decay_steps: 800,
            grad_clip: PAPER_GRAD_CLIP,
            mode,
            tts_pretrain_steps: if mode == ModeMix::Joint { 800 } else { 0 },
            seed: 0,
            checkpoint_every: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(MeldError::Config("total_steps must be > 0".into()));
        }
        if self.warmup_steps + self.hold_steps + self.decay_steps != self.total_steps {
            return Err(MeldError::Config(format!(
                "warmup {} + hold {} + decay {} must equal total {}",
                self.warmup_steps, self.hold_steps, self.decay_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(MeldError::Config("peak_lr must be finite and >= 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(MeldError::Config("grad_clip must be > 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(MeldError::Config("checkpoint_every must be > 0".into()));
        }
        if self.mode != ModeMix::Joint && self.tts_pretrain_steps != 0 {
            return Err(MeldError::Config(
                "tts_pretrain_steps is only meaningful in joint mode".into(),
            ));
        }
        if self.tts_pretrain_steps > self.total_steps {
            return Err(MeldError::Config(
                "tts_pretrain_steps exceeds total_steps".into(),
            ));
        }
        Ok(())
    }
}

/// Piecewise-linear learning rate: up over warmup, flat over hold, down to
/// zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    assert!(step <= cfg.total_steps, "step {step} beyond schedule");
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let past_hold = cfg.warmup_steps + cfg.hold_steps;
    if step <= past_hold {
        return cfg.peak_lr;
    }
    cfg.peak_lr * (cfg.total_steps - step) as f64 / cfg.decay_steps as f64
}

/// Corpus plus batching and augmentation settings.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub utterances: Vec<EncodedUtterance>,
    pub max_frames_per_batch: usize,
    /// Applied to the frames of STT-mode batches only.
    pub augment: SpecAugmentConfig,
    pub loss_weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub mode: Mode,
    pub report: LossReport,
    pub lr: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub final_step: usize,
    pub history: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_HEADER: &str = "step,mode,vlb_total,kl_term,reconstruction_mse,entropy_q,eos_ce,\
stt_ce,slowness,weighted_total,n_latent_targets,n_text_targets,n_eos_targets,\
n_target_positions,lr,grad_norm,seconds";

fn write_log_row(w: &mut dyn Write, rec: &StepRecord) -> Result<()> {
    let r = &rec.report;
    let mode = match rec.mode {
        Mode::Tts => "tts",
        Mode::Stt => "stt",
    };
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
        rec.step,
        mode,
        r.vlb_total,
        r.kl_term,
        r.reconstruction_mse,
        r.entropy_q,
        r.eos_ce,
        r.stt_ce,
        r.slowness,
        r.weighted_total,
        r.n_latent_targets,
        r.n_text_targets,
        r.n_eos_targets,
        r.n_target_positions,
        rec.lr,
        rec.grad_norm,
        rec.seconds
    )?;
    Ok(())
}

/// Mix in force for a given 1-based step.
fn mix_for_step(step: usize, cfg: &TrainConfig) -> ModeMix {
    match cfg.mode {
        ModeMix::Joint if step <= cfg.tts_pretrain_steps => ModeMix::Tts,
        other => other,
    }
}

/// Deterministic batch stream. Epoch seeds advance globally; a phase switch
/// (TTS pretraining ending) discards the remaining queue and rebuilds from
/// the next epoch seed.
struct BatchCursor<'a> {
    data: &'a TrainData,
    model_vocab: crate::text::UnifiedVocab,
    cfg: &'a TrainConfig,
    epoch: u64,
    queue: VecDeque<Batch>,
    phase_mix: Option<ModeMix>,
}

impl<'a> BatchCursor<'a> {
    fn new(data: &'a TrainData, vocab: crate::text::UnifiedVocab, cfg: &'a TrainConfig) -> Self {
        Self {
            data,
            model_vocab: vocab,
            cfg,
            epoch: 0,
            queue: VecDeque::new(),
            phase_mix: None,
        }
    }

    fn next_batch(&mut self, step: usize) -> Result<Batch> {
        let mix = mix_for_step(step, self.cfg);
        if self.phase_mix != Some(mix) {
            self.queue.clear();
            self.phase_mix = Some(mix);
        }
        if self.queue.is_empty() {
            let epoch_seed = crate::rng::sub_seed(self.cfg.seed, "train-epoch", self.epoch);
            self.epoch += 1;
            self.queue = make_batches(
                &self.data.utterances,
                &self.model_vocab,
                self.data.max_frames_per_batch,
                mix,
                epoch_seed,
            )?
            .into();
        }
        Ok(self.queue.pop_front().expect("non-empty epoch"))
    }
}

fn global_norm(grads: &BTreeMap<String, ArrayD<f64>>) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Run steps `start_step + 1 ..= cfg.total_steps`. `model` and `optimizer`
/// are updated in place; checkpoints (with optimizer state) go to
/// `ckpt_dir` at every multiple of `checkpoint_every` and at the final step.
/// Returns per-step records; `log` receives the same rows as CSV.
pub fn train(
    model: &mut MeldModel,
    optimizer: &mut AdamState,
    codebook: &Codebook,
    data: &TrainData,
    cfg: &TrainConfig,
    start_step: usize,
    ckpt_dir: Option<&Path>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    data.augment.validate()?;
    if codebook.k() != model.config.vocab.k_latent {
        return Err(MeldError::Config(format!(
            "codebook K {} vs model latent vocab {}",
            codebook.k(),
            model.config.vocab.k_latent
        )));
    }
    if codebook.dim() != model.config.d_mel_in {
        return Err(MeldError::Config(format!(
            "codebook dim {} vs model d_mel_in {}",
            codebook.dim(),
            model.config.d_mel_in
        )));
    }
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir)?;
    }
    if start_step == 0 {
        if let Some(w) = log.as_mut() {
            writeln!(w, "{LOG_HEADER}")?;
        }
    }

    let mut cursor = BatchCursor::new(data, model.config.vocab, cfg);
    // Structural replay up to the resume point; consumes no step RNG.
    for step in 1..=start_step.min(cfg.total_steps) {
        let _ = cursor.next_batch(step)?;
    }

    let cb_hash = codebook.content_hash();
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    for step in start_step + 1..=cfg.total_steps {
        let t0 = Instant::now();
        let batch = cursor.next_batch(step)?;
        let mut rng = crate::rng::stream(cfg.seed, "train-step", step as u64);
        let batch_id = batch
            .items
            .first()
            .map(|i| i.utt_id.clone())
            .unwrap_or_default();

        let total_targets: usize = batch.items.iter().map(|i| i.target_range().len()).sum();
        let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        let mut reports = Vec::with_capacity(batch.items.len());
        let mut bn_updates = None;
        for item in &batch.items {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let ItemLoss {
                loss,
                report,
                bn_updates: upd,
            } = match batch.mode {
                Mode::Tts => tts_loss(&bound, item, codebook, &data.loss_weights, true, &mut rng)?,
                Mode::Stt => {
                    let mut masked = item.clone();
                    masked.frames = spec_augment(&item.frames, &data.augment, &mut rng, true);
                    stt_loss(&bound, &masked, true, &mut rng)?
                }
            };
            let weight = item.target_range().len() as f64 / total_targets as f64;
            tape.backward(loss)?;
            let item_grads = bound.collect_grads();
            for (name, g) in item_grads {
                let entry = grads
                    .entry(name)
                    .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                entry.zip_mut_with(&g, |a, b| *a += weight * b);
            }
            if !upd.is_empty() {
                // Batches apply the last item's running-stat blend; the
                // default inference path uses instance stats anyway.
                bn_updates = Some(upd);
            }
            reports.push(report);
        }
        let report = pool_reports(&reports);
        let grad_norm = global_norm(&grads);
        if !report.is_finite() || !grad_norm.is_finite() {
            return Err(MeldError::NonFiniteLoss { step, batch_id });
        }
        if batch.mode == Mode::Stt {
            // Mode isolation: the reconstruction stack must see no gradient.
            for (name, g) in &grads {
                if name.starts_with("specnet.") || name.starts_with("postnet.") {
                    assert!(
                        g.iter().all(|v| *v == 0.0),
                        "STT step leaked gradient into {name}"
                    );
                }
            }
        }
        if grad_norm > cfg.grad_clip {
            let scale = cfg.grad_clip / grad_norm;
            for g in grads.values_mut() {
                g.mapv_inplace(|v| v * scale);
            }
            let post = global_norm(&grads);
            assert!(post <= cfg.grad_clip + 1e-6, "post-clip norm {post}");
        }
        let lr = lr_at(step, cfg);
        adam_step(
            &mut model.params,
            &grads,
            optimizer,
            &AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        )?;
        if let Some(upd) = &bn_updates {
            model.apply_bn_updates(upd);
        }

        let rec = StepRecord {
            step,
            mode: batch.mode,
            report,
            lr,
            grad_norm,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_mut() {
            write_log_row(*w, &rec)?;
        }
        history.push(rec);

        if let Some(dir) = ckpt_dir {
            if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
                let path = dir.join(format!("step-{step:06}.ckpt"));
                save_checkpoint(&path, model, &cb_hash, step as u64, Some(optimizer))?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutput {
        final_step: cfg.total_steps,
        history,
        checkpoints,
    })
}

/// Load a checkpoint and continue to `cfg.total_steps`. The stored config
/// and the provided codebook must match; at the final step this is a no-op.
pub fn resume(
    ckpt_path: &Path,
    codebook: &Codebook,
    data: &TrainData,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
    log: Option<&mut dyn Write>,
) -> Result<(MeldModel, AdamState, TrainOutput)> {
    let loaded = load_checkpoint(ckpt_path)?;
    // Config-vs-header consistency is checked at load; the codebook is the
    // caller's and must still be the one the latents were defined by.
    loaded.ensure_matches(&loaded.model.config, codebook)?;
    let mut model = loaded.model;
    let step = loaded.header.step as usize;
    if step > cfg.total_steps {
        return Err(MeldError::Checkpoint(format!(
            "checkpoint step {step} beyond schedule of {}",
            cfg.total_steps
        )));
    }
    let mut optimizer = loaded.optimizer.unwrap_or_default();
    let out = train(
        &mut model,
        &mut optimizer,
        codebook,
        data,
        cfg,
        step,
        ckpt_dir,
        log,
    )?;
    Ok((model, optimizer, out))
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
