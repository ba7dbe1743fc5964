//! Log-mel spectrogram extraction and its inverse-side bookkeeping.
//!
//! Analysis uses a Hann-windowed STFT without padding, so a signal shorter
//! than one window produces no frames and `T = (len - win) / hop + 1`
//! otherwise. Mel filters are triangles with unit peak, spaced uniformly on
//! the mel scale `2595 * log10(1 + f / 700)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{MeldError, Result};

/// Additive floor inside the log so silent bins stay finite.
pub const LOG_EPS: f64 = 1e-10;

/// Floor applied to per-dimension standard deviations.
const STD_FLOOR: f64 = 1e-5;

/// Analysis window shape. Only Hann is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Window {
    #[default]
    Hann,
}

/// Mel analysis configuration. Defaults match the shipped recipes: 80 mel
/// bins, 16 ms hop, 64 ms window, 1024-point FFT, 80-7600 Hz band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub hop_ms: f64,
    pub win_ms: f64,
    pub fft_size: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub window: Window,
    /// How many consecutive frames are concatenated into one model frame.
    pub stack_factor: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            hop_ms: 16.0,
            win_ms: 64.0,
            fft_size: 1024,
            fmin_hz: 80.0,
            fmax_hz: 7600.0,
            window: Window::Hann,
            stack_factor: 1,
        }
    }
}

impl MelConfig {
    pub fn hop_samples(&self, sample_rate_hz: u32) -> usize {
        (self.hop_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn win_samples(&self, sample_rate_hz: u32) -> usize {
        (self.win_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    /// Model-frame dimensionality after stacking.
    pub fn frame_dim(&self) -> usize {
        self.n_mels * self.stack_factor
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        if self.n_mels == 0 {
            return Err(MeldError::Config("n_mels must be > 0".into()));
        }
        if self.stack_factor == 0 {
            return Err(MeldError::Config("stack_factor must be >= 1".into()));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) {
            return Err(MeldError::Config(format!(
                "require 0 <= fmin < fmax, got fmin={} fmax={}",
                self.fmin_hz, self.fmax_hz
            )));
        }
        let nyquist = sample_rate_hz as f64 / 2.0;
        if self.fmax_hz > nyquist {
            return Err(MeldError::Config(format!(
                "fmax {} exceeds Nyquist {}",
                self.fmax_hz, nyquist
            )));
        }
        let hop = self.hop_samples(sample_rate_hz);
        let win = self.win_samples(sample_rate_hz);
        if hop == 0 || win == 0 {
            return Err(MeldError::Config("hop and window must be >= 1 sample".into()));
        }
        if win < hop {
            return Err(MeldError::Config(format!(
                "window ({win} samples) must cover the hop ({hop} samples)"
            )));
        }
        if self.fft_size < win {
            return Err(MeldError::Config(format!(
                "fft_size {} smaller than window ({win} samples)",
                self.fft_size
            )));
        }
        Ok(())
    }
}

/// A `[T, D]` log-mel (or stacked log-mel) matrix plus the config that
/// produced it and whether global normalization has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub config: MelConfig,
    pub normalized: bool,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Per-dimension corpus statistics for global mean-variance normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn hann_window(win: usize) -> Vec<f64> {
    // Periodic Hann; constant-overlap-add friendly for hop | win.
    (0..win)
        .map(|n| {
            let x = std::f64::consts::TAU * n as f64 / win as f64;
            0.5 * (1.0 - x.cos())
        })
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `[n_mels, fft_size / 2 + 1]`, unit peak per
/// filter. Triangle k spans mel points `k .. k + 2` of a uniform grid of
/// `n_mels + 2` points over `[fmin, fmax]`.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate_hz: u32) -> Array2<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    let bin_hz = sample_rate_hz as f64 / cfg.fft_size as f64;
    for m in 0..cfg.n_mels {
        let (lo, ctr, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= ctr {
                (f - lo) / (ctr - lo)
            } else {
                (hi - f) / (hi - ctr)
            };
            if w > 0.0 {
                fb[[m, b]] = w;
            }
        }
    }
    fb
}

/// Center frequencies (Hz) of the mel filters, used by frequency oracles.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Extract an unnormalized, unstacked log-mel spectrogram.
///
/// Frames are taken without padding: frame t covers samples
/// `[t * hop, t * hop + win)`, so `T = (len - win) / hop + 1`.
pub fn extract_mel(wave: &super::WaveBuffer, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate(wave.sample_rate_hz)?;
    let hop = cfg.hop_samples(wave.sample_rate_hz);
    let win = cfg.win_samples(wave.sample_rate_hz);
    if wave.len() < win {
        return Err(MeldError::EmptyInput(format!(
            "waveform of {} samples is shorter than one window ({win})",
            wave.len()
        )));
    }
    let t_frames = (wave.len() - win) / hop + 1;
    let window = hann_window(win);
    let fb = mel_filterbank(cfg, wave.sample_rate_hz);
    let n_bins = cfg.fft_size / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut frames = Array2::zeros((t_frames, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = Array1::zeros(n_bins);
    for t in 0..t_frames {
        let start = t * hop;
        for i in 0..cfg.fft_size {
            let v = if i < win {
                wave.samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for b in 0..n_bins {
            power[b] = buf[b].norm_sqr();
        }
        let mel = fb.dot(&power);
        for m in 0..cfg.n_mels {
            frames[[t, m]] = (mel[m] + LOG_EPS).ln();
        }
    }
    Ok(MelSpectrogram {
        frames,
        config: cfg.clone(),
        normalized: false,
    })
}

/// Fit per-dimension mean and population standard deviation over all frames
/// of all utterances. Standard deviations are floored at `1e-5`.
pub fn fit_norm_stats(mels: &[ArrayView2<f64>]) -> Result<NormStats> {
    let dim = mels
        .iter()
        .find(|m| m.nrows() > 0)
        .map(|m| m.ncols())
        .ok_or_else(|| MeldError::EmptyInput("no frames to fit norm stats".into()))?;
    let mut count = 0usize;
    let mut sum = Array1::<f64>::zeros(dim);
    let mut sum_sq = Array1::<f64>::zeros(dim);
    for m in mels {
        if m.nrows() == 0 {
            continue;
        }
        if m.ncols() != dim {
            return Err(MeldError::ShapeMismatch(format!(
                "mixed mel dims in norm fit: {} vs {dim}",
                m.ncols()
            )));
        }
        count += m.nrows();
        sum += &m.sum_axis(Axis(0));
        sum_sq += &m.mapv(|v| v * v).sum_axis(Axis(0));
    }
    let n = count as f64;
    let mean = &sum / n;
    let var = &sum_sq / n - &mean * &mean;
    let std = var.mapv(|v| v.max(0.0).sqrt().max(STD_FLOOR));
    Ok(NormStats {
        mean: mean.to_vec(),
        std: std.to_vec(),
    })
}

/// Apply `(x - mean) / std` per dimension. Rejects double normalization.
pub fn normalize(mel: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    if mel.normalized {
        return Err(MeldError::InvalidData("mel is already normalized".into()));
    }
    if mel.dim() != stats.dim() {
        return Err(MeldError::ShapeMismatch(format!(
            "mel dim {} vs stats dim {}",
            mel.dim(),
            stats.dim()
        )));
    }
    let mut frames = mel.frames.clone();
    for mut row in frames.rows_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[d]) / stats.std[d];
        }
    }
    Ok(MelSpectrogram {
        frames,
        config: mel.config.clone(),
        normalized: true,
    })
}

/// Invert [`normalize`].
pub fn denormalize(mel: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    if !mel.normalized {
        return Err(MeldError::InvalidData("mel is not normalized".into()));
    }
    if mel.dim() != stats.dim() {
        return Err(MeldError::ShapeMismatch(format!(
            "mel dim {} vs stats dim {}",
            mel.dim(),
            stats.dim()
        )));
    }
    let mut frames = mel.frames.clone();
    for mut row in frames.rows_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = *v * stats.std[d] + stats.mean[d];
        }
    }
    Ok(MelSpectrogram {
        frames,
        config: mel.config.clone(),
        normalized: false,
    })
}

/// Concatenate each run of `factor` consecutive frames into one frame of
/// dimension `factor * D`. The tail that does not fill a full group is
/// dropped, so the output has `T / factor` frames.
pub fn stack_frames(mel: &MelSpectrogram, factor: usize) -> Result<MelSpectrogram> {
    if factor == 0 {
        return Err(MeldError::Config("stack factor must be >= 1".into()));
    }
    let (t, d) = (mel.num_frames(), mel.dim());
    let t_out = t / factor;
    let mut frames = Array2::zeros((t_out, d * factor));
    for g in 0..t_out {
        for j in 0..factor {
            for k in 0..d {
                frames[[g, j * d + k]] = mel.frames[[g * factor + j, k]];
            }
        }
    }
    let mut config = mel.config.clone();
    config.stack_factor = mel.config.stack_factor * factor;
    Ok(MelSpectrogram {
        frames,
        config,
        normalized: mel.normalized,
    })
}

/// Invert [`stack_frames`]: split each frame back into `factor` frames.
pub fn unstack_frames(mel: &MelSpectrogram, factor: usize) -> Result<MelSpectrogram> {
    if factor == 0 {
        return Err(MeldError::Config("stack factor must be >= 1".into()));
    }
    let (t, d_stacked) = (mel.num_frames(), mel.dim());
    if d_stacked % factor != 0 {
        return Err(MeldError::ShapeMismatch(format!(
            "stacked dim {d_stacked} not divisible by factor {factor}"
        )));
    }
    if mel.config.stack_factor % factor != 0 {
        return Err(MeldError::ShapeMismatch(format!(
            "config stack_factor {} not divisible by {factor}",
            mel.config.stack_factor
        )));
    }
    let d = d_stacked / factor;
    let mut frames = Array2::zeros((t * factor, d));
    for g in 0..t {
        for j in 0..factor {
            for k in 0..d {
                frames[[g * factor + j, k]] = mel.frames[[g, j * d + k]];
            }
        }
    }
    let mut config = mel.config.clone();
    config.stack_factor = mel.config.stack_factor / factor;
    Ok(MelSpectrogram {
        frames,
        config,
        normalized: mel.normalized,
    })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
