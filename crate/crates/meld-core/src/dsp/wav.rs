//! 16-bit PCM mono WAV I/O.

use std::path::Path;

use crate::error::{MeldError, Result};

use super::WaveBuffer;

/// Read a mono 16-bit integer PCM WAV file.
pub fn read_wav(path: &Path) -> Result<WaveBuffer> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(MeldError::InvalidData(format!(
            "expected mono WAV, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(MeldError::InvalidData(format!(
            "expected 16-bit integer PCM, got {:?} {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(MeldError::from)?;
    let scaled = samples.into_iter().map(|s| s as f64 / 32768.0).collect();
    WaveBuffer::new(scaled, spec.sample_rate)
}

/// Write a mono 16-bit PCM WAV file. Samples are clamped before quantizing.
pub fn write_wav(path: &Path, wave: &WaveBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        // Same /32768 scale as the reader so the round trip only loses the
        // half-step quantization error.
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize().map_err(MeldError::from)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
