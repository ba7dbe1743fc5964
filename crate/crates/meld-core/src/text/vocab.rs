//! Unified id space over text tokens, latent codes, and special tokens.
//!
//! Layout: `[0, v_text)` text ids, `[v_text, v_text + k_latent)` latent
//! codes, then `<TTS>`, `<STT>`, `<EOS>` in that order.

use serde::{Deserialize, Serialize};

use crate::error::{MeldError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    pub v_text: usize,
    pub k_latent: usize,
}

pub fn make_unified_vocab(v_text: usize, k_latent: usize) -> Result<UnifiedVocab> {
    if v_text == 0 || k_latent == 0 {
        return Err(MeldError::Vocab(format!(
            "v_text and k_latent must be > 0, got ({v_text}, {k_latent})"
        )));
    }
    Ok(UnifiedVocab { v_text, k_latent })
}

impl UnifiedVocab {
    pub fn total(&self) -> usize {
        self.v_text + self.k_latent + 3
    }

    pub fn id_tts(&self) -> usize {
        self.v_text + self.k_latent
    }

    pub fn id_stt(&self) -> usize {
        self.v_text + self.k_latent + 1
    }

    pub fn id_eos(&self) -> usize {
        self.v_text + self.k_latent + 2
    }

    /// Unified id of latent code `k`.
    pub fn latent_id(&self, k: usize) -> usize {
        debug_assert!(k < self.k_latent);
        self.v_text + k
    }

    /// Latent code of a unified id, if it is a latent.
    pub fn latent_of(&self, id: usize) -> Option<usize> {
        if self.is_latent(id) {
            Some(id - self.v_text)
        } else {
            None
        }
    }

    pub fn is_text(&self, id: usize) -> bool {
        id < self.v_text
    }

    pub fn is_latent(&self, id: usize) -> bool {
        id >= self.v_text && id < self.v_text + self.k_latent
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= self.v_text + self.k_latent && id < self.total()
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id < self.total() {
            Ok(())
        } else {
            Err(MeldError::Vocab(format!(
                "id {id} out of range for unified vocab of {}",
                self.total()
            )))
        }
    }
}

/// A validated sequence of unified ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>, vocab: &UnifiedVocab) -> Result<Self> {
        for &id in &ids {
            vocab.check_id(id)?;
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
