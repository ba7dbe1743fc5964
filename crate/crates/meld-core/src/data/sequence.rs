//! Sequence assembly: the two Figure-2 layouts as validated items, and the
//! prompt-split convention for zero-shot continuation.

use ndarray::Array2;

use crate::error::{MeldError, Result};
use crate::model::{Mode, SequenceItem};
use crate::text::UnifiedVocab;

/// Smallest prompt used for continuation.
pub const MIN_PROMPT_FRAMES: usize = 4;

/// TTS item: inputs `[y.., <TTS>, x..]`, targets `[z.., <EOS>]`. Both the
/// transcript and the mel must be non-empty.
pub fn build_tts_sequence(
    text_ids: Vec<usize>,
    frames: Array2<f64>,
    vocab: &UnifiedVocab,
    utt_id: &str,
) -> Result<SequenceItem> {
    if text_ids.is_empty() {
        return Err(MeldError::EmptyInput("TTS transcript is empty".into()));
    }
    if frames.nrows() == 0 {
        return Err(MeldError::EmptyInput("TTS mel is empty".into()));
    }
    let mut item = SequenceItem::new(Mode::Tts, text_ids, frames, vocab)?;
    item.utt_id = utt_id.to_string();
    Ok(item)
}

/// STT item: inputs `[x.., <STT>, y..]`, targets `[y.. shifted, <EOS>]`; the
/// first text target is predicted from the `<STT>` position.
pub fn build_stt_sequence(
    frames: Array2<f64>,
    text_ids: Vec<usize>,
    vocab: &UnifiedVocab,
    utt_id: &str,
) -> Result<SequenceItem> {
    if frames.nrows() == 0 {
        return Err(MeldError::EmptyInput("STT mel is empty".into()));
    }
    if text_ids.is_empty() {
        return Err(MeldError::EmptyInput("STT transcript is empty".into()));
    }
    let mut item = SequenceItem::new(Mode::Stt, text_ids, frames, vocab)?;
    item.utt_id = utt_id.to_string();
    Ok(item)
}

/// Desk-scale prompt convention: the first quarter of the frames, at least
/// [`MIN_PROMPT_FRAMES`], never more than the utterance itself.
pub fn prompt_len(n_frames: usize) -> usize {
    (n_frames / 4).max(MIN_PROMPT_FRAMES).min(n_frames)
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::make_unified_vocab;

    fn vocab() -> UnifiedVocab {
        make_unified_vocab(10, 4).unwrap()
    }

    #[test]
    fn tts_layout_arithmetic() {
        let v = vocab();
        let item = build_tts_sequence(vec![1, 2], Array2::zeros((3, 5)), &v, "u").unwrap();
        assert_eq!(item.seq_len(), 6);
        let r = item.target_range();
        assert_eq!(r.len(), 4);
        assert_eq!(r, 2..6);
    }

    #[test]
    fn tts_single_frame() {
        let v = vocab();
        let item = build_tts_sequence(vec![0], Array2::zeros((1, 5)), &v, "u").unwrap();
        // One latent slot then <EOS>.
        assert_eq!(item.target_range().len(), 2);
    }

    #[test]
    fn stt_layout_arithmetic() {
        let v = vocab();
        let item = build_stt_sequence(Array2::zeros((3, 5)), vec![4, 5], &v, "u").unwrap();
        assert_eq!(item.seq_len(), 6);
        // Targets [y1, y2, <EOS>] predicted from <STT>, y1, y2.
        assert_eq!(item.target_range(), 3..6);
        assert_eq!(item.stt_targets(&v), vec![4, 5, v.id_eos()]);
    }

    #[test]
    fn empty_inputs_rejected() {
        let v = vocab();
        assert!(build_tts_sequence(vec![], Array2::zeros((3, 5)), &v, "u").is_err());
        assert!(build_tts_sequence(vec![1], Array2::zeros((0, 5)), &v, "u").is_err());
        assert!(build_stt_sequence(Array2::zeros((0, 5)), vec![1], &v, "u").is_err());
        assert!(build_stt_sequence(Array2::zeros((3, 5)), vec![], &v, "u").is_err());
    }

    #[test]
    fn stt_targets_never_latent() {
        let v = vocab();
        let item = build_stt_sequence(Array2::zeros((4, 5)), vec![0, 9, 3], &v, "u").unwrap();
        for id in item.stt_targets(&v) {
            assert!(!v.is_latent(id));
        }
    }

    #[test]
    fn prompt_convention() {
        assert_eq!(prompt_len(100), 25);
        assert_eq!(prompt_len(16), 4);
        assert_eq!(prompt_len(8), 4);
        // Short utterances: whole thing, never beyond.
        assert_eq!(prompt_len(3), 3);
        assert_eq!(prompt_len(0), 0);
    }
}
