//! Batching: length-bucketed packing under a frame budget with a per-epoch
//! shuffle, and the joint-mode coin flip that assigns each batch a task.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeldError, Result};
use crate::model::{Mode, SequenceItem};
use crate::text::UnifiedVocab;

use super::sequence::{build_stt_sequence, build_tts_sequence};

/// Which task(s) batches are assembled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeMix {
    Tts,
    Stt,
    Joint,
}

/// A tokenized, featurized utterance ready for sequence assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUtterance {
    pub utt_id: String,
    pub text_ids: Vec<usize>,
    /// `[n_frames, d_mel]` normalized model frames.
    pub frames: Array2<f64>,
}

/// One training batch; all items share a mode, losses pool over the items'
/// target positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub mode: Mode,
    pub items: Vec<SequenceItem>,
}

impl Batch {
    pub fn total_frames(&self) -> usize {
        self.items.iter().map(SequenceItem::n_frames).sum()
    }
}

/// Assemble one epoch of batches.
///
/// Deterministic in `(utterances, mode_mix, budget, epoch_seed)`: utterances
/// are shuffled by the epoch seed, sorted by frame count so neighbors have
/// similar lengths (stable sort keeps the shuffle as tiebreak), packed
/// greedily under `max_frames_per_batch`, and the batch order reshuffled. In
/// joint mode each batch flips a fair coin between TTS and STT.
pub fn make_batches(
    utterances: &[EncodedUtterance],
    vocab: &UnifiedVocab,
    max_frames_per_batch: usize,
    mode_mix: ModeMix,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    if utterances.is_empty() {
        return Err(MeldError::EmptyInput("no utterances to batch".into()));
    }
    if max_frames_per_batch == 0 {
        return Err(MeldError::Config("max_frames_per_batch must be > 0".into()));
    }
    for u in utterances {
        if u.frames.nrows() > max_frames_per_batch {
            return Err(MeldError::InvalidData(format!(
                "utterance {} has {} frames, over the {} frame budget",
                u.utt_id,
                u.frames.nrows(),
                max_frames_per_batch
            )));
        }
    }
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    let mut shuffle_rng = crate::rng::stream(epoch_seed, "batch-shuffle", 0);
    order.shuffle(&mut shuffle_rng);
    order.sort_by_key(|&i| utterances[i].frames.nrows());

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_frames = 0usize;
    for idx in order {
        let n = utterances[idx].frames.nrows();
        if !current.is_empty() && current_frames + n > max_frames_per_batch {
            groups.push(std::mem::take(&mut current));
            current_frames = 0;
        }
        current.push(idx);
        current_frames += n;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut shuffle_rng);

    let mut mode_rng = crate::rng::stream(epoch_seed, "batch-mode", 0);
    let mut batches = Vec::with_capacity(groups.len());
    for group in groups {
        let mode = match mode_mix {
            ModeMix::Tts => Mode::Tts,
            ModeMix::Stt => Mode::Stt,
            ModeMix::Joint => {
                if mode_rng.random::<bool>() {
                    Mode::Tts
                } else {
                    Mode::Stt
                }
            }
        };
        let mut items = Vec::with_capacity(group.len());
        for idx in group {
            let u = &utterances[idx];
            let item = match mode {
                Mode::Tts => {
                    build_tts_sequence(u.text_ids.clone(), u.frames.clone(), vocab, &u.utt_id)?
                }
                Mode::Stt => {
                    build_stt_sequence(u.frames.clone(), u.text_ids.clone(), vocab, &u.utt_id)?
                }
            };
            items.push(item);
        }
        batches.push(Batch { mode, items });
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
