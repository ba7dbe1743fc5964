//! Headless plotting: mel spectrograms become binary PGM heatmaps and the
//! training log is condensed to a loss-curve CSV.

use ndarray::ArrayView2;

use crate::errors::{CliError, CliResult};

/// Render a mel matrix (T rows of D bins) as a binary PGM image, one pixel
/// per (frame, bin) cell, min-max scaled to 0..255. A constant input maps
/// to mid gray so silence does not render as black-on-black noise.
pub fn mel_to_pgm(mel: ArrayView2<'_, f64>) -> CliResult<Vec<u8>> {
    let (t, d) = mel.dim();
    if t == 0 || d == 0 {
        return Err(CliError::validation("cannot plot an empty mel matrix"));
    }
    if mel.iter().any(|v| !v.is_finite()) {
        return Err(CliError::validation("mel matrix contains non-finite values"));
    }
    let lo = mel.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;

    let mut out = format!("P5\n{d} {t}\n255\n").into_bytes();
    out.reserve(t * d);
    for row in mel.rows() {
        for &v in row {
            let px = if span == 0.0 {
                128
            } else {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            };
            out.push(px);
        }
    }
    Ok(out)
}

/// Fraction of pixels whose gray level differs between two images of equal
/// dimensions. Used by the smoke tests to show distinct inputs render
/// distinctly.
#[cfg_attr(not(test), allow(dead_code))]
pub fn pgm_pixel_diff(a: &[u8], b: &[u8]) -> CliResult<f64> {
    let (ha, pa) = split_pgm(a)?;
    let (hb, pb) = split_pgm(b)?;
    if ha != hb {
        return Err(CliError::validation("PGM dimensions differ"));
    }
    let differing = pa.iter().zip(pb).filter(|(x, y)| x != y).count();
    Ok(differing as f64 / pa.len() as f64)
}

/// Split a binary PGM into its header dims and pixel payload. The payload
/// is raw bytes, so only the three header lines go through UTF-8.
#[cfg_attr(not(test), allow(dead_code))]
pub fn split_pgm(bytes: &[u8]) -> CliResult<((usize, usize), &[u8])> {
    let err = || CliError::validation("not a binary PGM produced by this tool");
    let mut lines = Vec::with_capacity(3);
    let mut pos = 0;
    for _ in 0..3 {
        let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(err)?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| err())?;
        lines.push(line);
        pos += nl + 1;
    }
    if lines[0] != "P5" || lines[2] != "255" {
        return Err(err());
    }
    let mut dims = lines[1].split_whitespace();
    let w: usize = dims.next().ok_or_else(err)?.parse().map_err(|_| err())?;
    let h: usize = dims.next().ok_or_else(err)?.parse().map_err(|_| err())?;
    let payload = &bytes[pos..];
    if payload.len() != w * h {
        return Err(err());
    }
    Ok(((w, h), payload))
}

/// Reduce the full training log to the loss curve: step, mode, weighted
/// total, and the VLB/STT components that make it up.
pub fn log_to_loss_csv(log: &str) -> CliResult<String> {
    let mut lines = log.lines();
    let header = lines.next().ok_or_else(|| CliError::validation("training log is empty"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| CliError::validation(format!("training log lacks column {name}")))
    };
    let keep = [
        find("step")?,
        find("mode")?,
        find("weighted_total")?,
        find("vlb_total")?,
        find("stt_ce")?,
    ];

    let mut out = String::from("step,mode,weighted_total,vlb_total,stt_ce\n");
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(CliError::validation(format!(
                "training log row {} has {} fields, expected {}",
                i + 2,
                fields.len(),
                cols.len()
            )));
        }
        let row: Vec<&str> = keep.iter().map(|&k| fields[k]).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
