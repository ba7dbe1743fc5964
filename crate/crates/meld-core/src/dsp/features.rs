//! On-disk mel feature container.
//!
//! Layout: magic `MELD`, format version (u32 LE), frame count T (u32 LE),
//! dimension D (u32 LE), then `T * D` little-endian f32 values row-major,
//! then a JSON trailer holding the analysis config and normalization flag.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MeldError, Result};

use super::mel::{MelConfig, MelSpectrogram};

const MAGIC: &[u8; 4] = b"MELD";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Trailer {
    config: MelConfig,
    normalized: bool,
}

/// Write a mel spectrogram to `path` in the container format.
pub fn write_mel_file(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let (t, d) = (mel.num_frames(), mel.dim());
    if t > u32::MAX as usize || d > u32::MAX as usize {
        return Err(MeldError::InvalidData("mel too large for container".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for v in mel.frames.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    let trailer = Trailer {
        config: mel.config.clone(),
        normalized: mel.normalized,
    };
    serde_json::to_writer(&mut w, &trailer)?;
    w.flush()?;
    Ok(())
}

/// Read a mel spectrogram from the container format. Values are widened back
/// to f64; storage is f32, so round trips are exact only to f32 precision.
pub fn read_mel_file(path: &Path) -> Result<MelSpectrogram> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MeldError::InvalidData(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut u = [0u8; 4];
    r.read_exact(&mut u)?;
    let version = u32::from_le_bytes(u);
    if version != VERSION {
        return Err(MeldError::InvalidData(format!(
            "unsupported feature file version {version}"
        )));
    }
    r.read_exact(&mut u)?;
    let t = u32::from_le_bytes(u) as usize;
    r.read_exact(&mut u)?;
    let d = u32::from_le_bytes(u) as usize;
    let mut payload = vec![0u8; t * d * 4];
    r.read_exact(&mut payload)?;
    let mut values = Vec::with_capacity(t * d);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let trailer: Trailer = serde_json::from_slice(&rest)?;
    let frames = Array2::from_shape_vec((t, d), values)
        .map_err(|e| MeldError::ShapeMismatch(e.to_string()))?;
    Ok(MelSpectrogram {
        frames,
        config: trailer.config,
        normalized: trailer.normalized,
    })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_mel() -> MelSpectrogram {
        MelSpectrogram {
            frames: Array2::from_shape_fn((5, 3), |(t, d)| (t as f64 - 2.0) * 0.25 + d as f64),
            config: MelConfig::default(),
            normalized: true,
        }
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel");
        let mel = sample_mel();
        write_mel_file(&path, &mel).unwrap();
        let back = read_mel_file(&path).unwrap();
        assert_eq!(back.num_frames(), 5);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.normalized, true);
        assert_eq!(back.config, mel.config);
        for (a, b) in mel.frames.iter().zip(back.frames.iter()) {
            // Stored as f32.
            assert!((a - b).abs() <= (*a as f32).abs() as f64 * 1e-6 + 1e-7);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mel");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        assert!(read_mel_file(&path).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mel");
        write_mel_file(&path, &sample_mel()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(read_mel_file(&path).is_err());
    }

    #[test]
    fn header_encodes_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.mel");
        write_mel_file(&path, &sample_mel()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"MELD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
    }
}
