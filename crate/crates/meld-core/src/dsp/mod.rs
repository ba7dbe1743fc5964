//! Waveform-to-mel front end: STFT mel analysis, global normalization, frame
//! stacking, Griffin-Lim inversion, and the on-disk feature container.

mod features;
mod griffin_lim;
mod mel;
mod wav;

pub use features::{read_mel_file, write_mel_file};
pub use griffin_lim::{invert_mel_griffin_lim, spectral_convergence, GriffinLimOptions};
pub use mel::{
    extract_mel, fit_norm_stats, mel_center_frequencies, mel_filterbank, normalize, denormalize,
    stack_frames, unstack_frames, MelConfig, MelSpectrogram, NormStats, Window, LOG_EPS,
};
pub use wav::{read_wav, write_wav};

use crate::error::{MeldError, Result};

/// Mono waveform with its sample rate. Samples are clamped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(MeldError::Config("sample_rate_hz must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(MeldError::InvalidData("non-finite wave sample".into()));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum_sq: f64 = self.samples.iter().map(|s| s * s).sum();
        (sum_sq / self.samples.len() as f64).sqrt()
    }
}
