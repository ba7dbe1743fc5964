//! SpecAugment for the STT direction: frequency-band and frame masks with
//! the time-mask length clipped by a ratio of the utterance length.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeldError, Result};

/// Masked cells are set to the normalized-space mean.
pub const MASK_FILL: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub n_freq_masks: usize,
    pub max_freq_bands: usize,
    pub n_time_masks: usize,
    pub max_frames_per_mask: usize,
    /// Per-mask time length is additionally clipped to `ratio * n_frames`.
    pub time_mask_cap_ratio: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            max_freq_bands: 30,
            n_time_masks: 10,
            max_frames_per_mask: 50,
            time_mask_cap_ratio: 0.1,
        }
    }
}

impl SpecAugmentConfig {
    /// Joint-mode preset: two frame masks and two frequency masks.
    pub fn joint() -> Self {
        Self {
            n_time_masks: 2,
            ..Self::default()
        }
    }

    pub fn none() -> Self {
        Self {
            n_freq_masks: 0,
            max_freq_bands: 0,
            n_time_masks: 0,
            max_frames_per_mask: 0,
            time_mask_cap_ratio: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time_mask_cap_ratio > 0.0 && self.time_mask_cap_ratio <= 1.0) {
            return Err(MeldError::Config(format!(
                "time_mask_cap_ratio {} outside (0, 1]",
                self.time_mask_cap_ratio
            )));
        }
        Ok(())
    }
}

/// Apply frame and frequency-band masks in place of a copy. Identity when
/// `train_flag` is false. Mask lengths are inclusive-uniform:
/// time length in `{0..min(max_frames_per_mask, floor(ratio * T))}`, width
/// in `{0..min(max_freq_bands, D)}`. Sequence length never changes and
/// unmasked cells pass through untouched.
pub fn spec_augment(
    mel: &Array2<f64>,
    cfg: &SpecAugmentConfig,
    rng: &mut ChaCha8Rng,
    train_flag: bool,
) -> Array2<f64> {
    cfg.validate().expect("invalid SpecAugmentConfig");
    let mut out = mel.clone();
    if !train_flag {
        return out;
    }
    let (t, d) = out.dim();
    if t == 0 || d == 0 {
        return out;
    }
    let time_cap = cfg
        .max_frames_per_mask
        .min((cfg.time_mask_cap_ratio * t as f64).floor() as usize)
        .min(t);
    for _ in 0..cfg.n_time_masks {
        let len = rng.random_range(0..=time_cap);
        let start = rng.random_range(0..=t - len);
        out.slice_mut(ndarray::s![start..start + len, ..]).fill(MASK_FILL);
    }
    let freq_cap = cfg.max_freq_bands.min(d);
    for _ in 0..cfg.n_freq_masks {
        let width = rng.random_range(0..=freq_cap);
        let start = rng.random_range(0..=d - width);
        out.slice_mut(ndarray::s![.., start..start + width]).fill(MASK_FILL);
    }
    out
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
