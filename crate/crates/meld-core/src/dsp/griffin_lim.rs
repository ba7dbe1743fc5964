//! Griffin-Lim mel inversion.
//!
//! The mel spectrogram is lifted back to a linear power spectrogram with a
//! non-negative least squares fit against the analysis filterbank, then
//! Griffin-Lim phase recovery runs on the magnitude spectrogram. Input must
//! be denormalized and unstacked (one analysis frame per row).

use ndarray::{Array1, Array2};
use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{MeldError, Result};
use crate::rng;

use super::mel::{mel_filterbank, MelSpectrogram, LOG_EPS};
use super::WaveBuffer;

#[derive(Debug, Clone)]
pub struct GriffinLimOptions {
    /// Phase recovery iterations; must be >= 1.
    pub iterations: usize,
    /// Projected-gradient steps for the mel-to-linear lift.
    pub nnls_iterations: usize,
    /// Seed for the random phase initialization.
    pub seed: u64,
}

impl Default for GriffinLimOptions {
    fn default() -> Self {
        Self {
            iterations: 60,
            nnls_iterations: 60,
            seed: 0,
        }
    }
}

fn hann_window(win: usize) -> Vec<f64> {
    (0..win)
        .map(|n| {
            let x = std::f64::consts::TAU * n as f64 / win as f64;
            0.5 * (1.0 - x.cos())
        })
        .collect()
}

/// STFT without padding: one row per frame, `fft_size / 2 + 1` bins.
pub fn stft(samples: &[f64], win: usize, hop: usize, fft_size: usize) -> Array2<Complex<f64>> {
    assert!(win <= fft_size && hop >= 1);
    let n_bins = fft_size / 2 + 1;
    let t_frames = if samples.len() < win {
        0
    } else {
        (samples.len() - win) / hop + 1
    };
    let window = hann_window(win);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut out = Array2::from_elem((t_frames, n_bins), Complex::new(0.0, 0.0));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for t in 0..t_frames {
        let start = t * hop;
        for i in 0..fft_size {
            let v = if i < win {
                samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for b in 0..n_bins {
            out[[t, b]] = buf[b];
        }
    }
    out
}

/// Inverse STFT by windowed overlap-add with squared-window normalization.
/// Output length is `(T - 1) * hop + win`.
pub fn istft(spec: &Array2<Complex<f64>>, win: usize, hop: usize, fft_size: usize) -> Vec<f64> {
    let t_frames = spec.nrows();
    if t_frames == 0 {
        return Vec::new();
    }
    let n_bins = fft_size / 2 + 1;
    assert_eq!(spec.ncols(), n_bins);
    let out_len = (t_frames - 1) * hop + win;
    let window = hann_window(win);
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(fft_size);
    let mut acc = vec![0.0f64; out_len];
    let mut norm = vec![0.0f64; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for t in 0..t_frames {
        // Rebuild the full Hermitian spectrum from the half-spectrum.
        for b in 0..n_bins {
            buf[b] = spec[[t, b]];
        }
        for b in n_bins..fft_size {
            buf[b] = spec[[t, fft_size - b]].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..win {
            let v = buf[i].re / fft_size as f64;
            acc[start + i] += v * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for i in 0..out_len {
        if norm[i] > 1e-10 {
            acc[i] /= norm[i];
        }
    }
    acc
}

/// Lift mel power frames `[T, n_mels]` to linear power `[T, n_bins]` by
/// projected gradient descent on `0.5 * ||S F^T - B||^2` with `S >= 0`.
fn nnls_lift(mel_power: &Array2<f64>, fb: &Array2<f64>, iterations: usize) -> Array2<f64> {
    // Lipschitz constant of the gradient: largest eigenvalue of F^T F,
    // estimated by power iteration.
    let n_bins = fb.ncols();
    let mut v = Array1::from_elem(n_bins, 1.0 / (n_bins as f64).sqrt());
    let mut lambda = 1.0;
    for _ in 0..100 {
        let w = fb.t().dot(&fb.dot(&v));
        lambda = w.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm < 1e-30 {
            break;
        }
        v = w / norm;
    }
    let step = 0.99 / lambda.max(1e-12);
    let mut s = mel_power.dot(fb); // F^T b per frame; non-negative start
    for _ in 0..iterations {
        let resid = s.dot(&fb.t()) - mel_power;
        let grad = resid.dot(fb);
        s = (s - step * &grad).mapv(|x| x.max(0.0));
    }
    s
}

/// Frobenius-relative distance between the magnitude of `wave`'s STFT and a
/// target magnitude spectrogram. Diagnostic for phase recovery quality.
pub fn spectral_convergence(
    wave: &[f64],
    target_mag: &Array2<f64>,
    win: usize,
    hop: usize,
    fft_size: usize,
) -> f64 {
    let spec = stft(wave, win, hop, fft_size);
    assert_eq!(spec.shape(), target_mag.shape());
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, m) in spec.iter().zip(target_mag.iter()) {
        let d = c.norm() - m;
        num += d * d;
        den += m * m;
    }
    if den <= 0.0 {
        return 0.0;
    }
    (num / den).sqrt()
}

/// Invert a normalized (possibly stacked) log-mel spectrogram to a waveform.
/// Denormalizes with `stats`, unstacks to one analysis frame per row, lifts
/// to linear power, and runs Griffin-Lim phase recovery.
pub fn invert_mel_griffin_lim(
    mel: &MelSpectrogram,
    stats: &crate::dsp::NormStats,
    sample_rate_hz: u32,
    opts: &GriffinLimOptions,
) -> Result<WaveBuffer> {
    if opts.iterations == 0 {
        return Err(MeldError::Config("griffin-lim needs >= 1 iteration".into()));
    }
    if !mel.normalized {
        return Err(MeldError::InvalidData(
            "inversion expects a normalized mel plus its stats".into(),
        ));
    }
    let mel = crate::dsp::denormalize(mel, stats)?;
    let mel = if mel.config.stack_factor > 1 {
        crate::dsp::unstack_frames(&mel, mel.config.stack_factor)?
    } else {
        mel
    };
    invert_unstacked(&mel, sample_rate_hz, opts)
}

/// Inversion core on a denormalized, unstacked mel.
fn invert_unstacked(
    mel: &MelSpectrogram,
    sample_rate_hz: u32,
    opts: &GriffinLimOptions,
) -> Result<WaveBuffer> {
    if mel.dim() != mel.config.n_mels {
        return Err(MeldError::ShapeMismatch(format!(
            "mel dim {} vs config n_mels {}",
            mel.dim(),
            mel.config.n_mels
        )));
    }
    mel.config.validate(sample_rate_hz)?;
    if mel.num_frames() == 0 {
        return Err(MeldError::EmptyInput("no frames to invert".into()));
    }
    let hop = mel.config.hop_samples(sample_rate_hz);
    let win = mel.config.win_samples(sample_rate_hz);
    let fft_size = mel.config.fft_size;

    let mel_power = mel.frames.mapv(|x| (x.exp() - LOG_EPS).max(0.0));
    let fb = mel_filterbank(&mel.config, sample_rate_hz);
    let linear_power = nnls_lift(&mel_power, &fb, opts.nnls_iterations);
    let mag = linear_power.mapv(f64::sqrt);

    // Random initial phase, then alternate projection between the magnitude
    // constraint and the set of consistent spectrograms.
    let mut phase_rng = rng::stream(opts.seed, "griffin-lim-phase", 0);
    let mut spec = mag.mapv(|m| {
        let phi: f64 = phase_rng.random::<f64>() * std::f64::consts::TAU;
        Complex::from_polar(m, phi)
    });
    let mut wave_samples = istft(&spec, win, hop, fft_size);
    for _ in 1..opts.iterations {
        let analyzed = stft(&wave_samples, win, hop, fft_size);
        for ((t, b), c) in spec.indexed_iter_mut() {
            let a = analyzed[[t, b]];
            let phase = if a.norm() > 1e-30 { a / a.norm() } else { Complex::new(1.0, 0.0) };
            *c = phase * mag[[t, b]];
        }
        wave_samples = istft(&spec, win, hop, fft_size);
    }
    let peak = wave_samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        for s in &mut wave_samples {
            *s /= peak;
        }
    }
    WaveBuffer::new(wave_samples, sample_rate_hz)
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel::{extract_mel, fit_norm_stats, normalize, MelConfig};
    use crate::dsp::NormStats;

    const SR: u32 = 16_000;

    fn sine(freq: f64, secs: f64, amp: f64) -> WaveBuffer {
        let n = (secs * SR as f64).round() as usize;
        let samples = (0..n)
            .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / SR as f64).sin())
            .collect();
        WaveBuffer::new(samples, SR).unwrap()
    }

    fn identity_stats(dim: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Extract, normalize against self-fit stats, return both.
    fn normalized_mel(wave: &WaveBuffer, cfg: &MelConfig) -> (MelSpectrogram, NormStats) {
        let mel = extract_mel(wave, cfg).unwrap();
        let stats = fit_norm_stats(&[mel.frames.view()]).unwrap();
        (normalize(&mel, &stats).unwrap(), stats)
    }

    #[test]
    fn stft_istft_reconstructs_interior() {
        let wave = sine(440.0, 0.5, 0.5);
        let spec = stft(&wave.samples, 1024, 256, 1024);
        let rec = istft(&spec, 1024, 256, 1024);
        // Interior samples (full overlap) must match closely; edges have
        // partial window coverage and are normalized but noisier.
        for i in 1024..rec.len() - 1024 {
            assert!(
                (rec[i] - wave.samples[i]).abs() < 1e-8,
                "sample {i}: {} vs {}",
                rec[i],
                wave.samples[i]
            );
        }
    }

    #[test]
    fn istft_length_matches_no_padding_convention() {
        let spec = stft(&vec![0.1; 4096], 1024, 256, 1024);
        assert_eq!(spec.nrows(), (4096 - 1024) / 256 + 1);
        let rec = istft(&spec, 1024, 256, 1024);
        assert_eq!(rec.len(), (spec.nrows() - 1) * 256 + 1024);
    }

    #[test]
    fn inversion_recovers_dominant_frequency() {
        let cfg = MelConfig::default();
        let wave = sine(440.0, 0.5, 0.5);
        let (mel, stats) = normalized_mel(&wave, &cfg);
        let rec =
            invert_mel_griffin_lim(&mel, &stats, SR, &GriffinLimOptions::default()).unwrap();
        assert!(rec.rms() > 1e-3);
        // Dominant frequency via a long FFT over the middle of the signal.
        let n = 8192.min(rec.len());
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> =
            rec.samples[..n].iter().map(|&s| Complex::new(s, 0.0)).collect();
        fft.process(&mut buf);
        let peak_bin = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap();
        let peak_hz = peak_bin as f64 * SR as f64 / n as f64;
        // One mel-bin bandwidth around 440 Hz is ~65 Hz for these settings.
        assert!(
            (peak_hz - 440.0).abs() < 70.0,
            "dominant frequency {peak_hz}"
        );
    }

    #[test]
    fn zero_mel_inverts_to_near_silence() {
        let cfg = MelConfig::default();
        let n_mels = cfg.n_mels;
        let mel = MelSpectrogram {
            frames: Array2::from_elem((20, n_mels), LOG_EPS.ln()),
            config: cfg,
            normalized: true,
        };
        let stats = identity_stats(n_mels);
        let rec =
            invert_mel_griffin_lim(&mel, &stats, SR, &GriffinLimOptions::default()).unwrap();
        assert!(rec.rms() < 1e-3, "rms {}", rec.rms());
    }

    #[test]
    fn inversion_is_seed_deterministic() {
        let cfg = MelConfig::default();
        let (mel, stats) = normalized_mel(&sine(330.0, 0.2, 0.4), &cfg);
        let opts = GriffinLimOptions {
            iterations: 8,
            ..Default::default()
        };
        let a = invert_mel_griffin_lim(&mel, &stats, SR, &opts).unwrap();
        let b = invert_mel_griffin_lim(&mel, &stats, SR, &opts).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn stacked_input_is_unstacked_before_inversion() {
        let cfg = MelConfig::default();
        let wave = sine(440.0, 0.5, 0.5);
        let (mel, stats) = normalized_mel(&wave, &cfg);
        let stacked = crate::dsp::stack_frames(&mel, 2).unwrap();
        let stacked_stats = NormStats {
            mean: [stats.mean.clone(), stats.mean.clone()].concat(),
            std: [stats.std.clone(), stats.std.clone()].concat(),
        };
        let rec =
            invert_mel_griffin_lim(&stacked, &stacked_stats, SR, &GriffinLimOptions::default())
                .unwrap();
        // 0.5 s -> 28 analysis frames -> 14 stacked -> 28 after unstacking.
        assert_eq!(rec.len(), 27 * 256 + 1024);
        assert!(rec.rms() > 1e-3);
    }

    #[test]
    fn more_iterations_do_not_hurt_convergence() {
        let cfg = MelConfig::default();
        let wave = sine(523.25, 0.3, 0.5);
        let (mel, stats) = normalized_mel(&wave, &cfg);
        let mag_target = {
            let spec = stft(&wave.samples, 1024, 256, 1024);
            spec.mapv(|c| c.norm())
        };
        let sc = |iters: usize| {
            let opts = GriffinLimOptions {
                iterations: iters,
                ..Default::default()
            };
            let rec = invert_mel_griffin_lim(&mel, &stats, SR, &opts).unwrap();
            // The reconstruction is (T - 1) * hop + win samples, which the
            // no-padding STFT maps back to exactly T frames.
            spectral_convergence(&rec.samples, &mag_target, 1024, 256, 1024)
        };
        let few = sc(2);
        let many = sc(40);
        assert!(many <= few + 0.05, "few {few} many {many}");
    }

    #[test]
    fn invalid_inputs_rejected() {
        let cfg = MelConfig::default();
        let stats = identity_stats(cfg.n_mels);
        // Unnormalized input is rejected: inversion wants mel + stats.
        let mel = MelSpectrogram {
            frames: Array2::zeros((4, cfg.n_mels)),
            config: cfg.clone(),
            normalized: false,
        };
        assert!(invert_mel_griffin_lim(&mel, &stats, SR, &GriffinLimOptions::default()).is_err());
        let mel = MelSpectrogram {
            frames: Array2::zeros((4, cfg.n_mels)),
            config: cfg,
            normalized: true,
        };
        let opts = GriffinLimOptions {
            iterations: 0,
            ..Default::default()
        };
        assert!(invert_mel_griffin_lim(&mel, &stats, SR, &opts).is_err());
    }
}
