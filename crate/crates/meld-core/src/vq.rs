//! Frozen k-means codebook and the soft vector-quantization posterior
//!
//! ```text
//! q(z_t = k | x_t) = exp(-||x_t - c_k||^2 / tau) / sum_j exp(-||x_t - c_j||^2 / tau)
//! ```
//!
//! which equals the responsibility of an equal-weight isotropic Gaussian
//! mixture with per-component covariance (tau/2) I. The codebook is fit once
//! with k-means++ plus Lloyd iterations on normalized frames and never
//! trained afterwards.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MeldError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[K, d]`, row k is codeword c_k.
    pub codewords: Array2<f64>,
    pub tau: f64,
    pub seed: u64,
    pub frozen: bool,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.codewords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.ncols()
    }

    pub fn codeword(&self, k: usize) -> ArrayView1<'_, f64> {
        self.codewords.row(k)
    }

    /// SHA-256 of the codeword matrix bytes; constant across training runs
    /// because the codebook is frozen.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.codewords.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Posterior over codewords for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub probs: Vec<f64>,
}

impl SoftAssignment {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probs.iter().sum();
        if self.probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(MeldError::InvalidData(format!(
                "invalid simplex vector, sum {sum}"
            )));
        }
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

fn squared_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fit a codebook with k-means++ seeding and Lloyd iterations. Stops when
/// the relative distortion change drops below 1e-6 or after `max_iters`.
/// Centroids are rounded through f32 so the on-disk format is lossless.
pub fn kmeans_fit(
    frames: ArrayView2<f64>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Codebook> {
    kmeans_fit_traced(frames, k, max_iters, seed).map(|(cb, _)| cb)
}

/// As [`kmeans_fit`] but also returns the per-iteration distortion trace
/// (sum of squared distances to the assigned centroid).
pub fn kmeans_fit_traced(
    frames: ArrayView2<f64>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Codebook, Vec<f64>)> {
    let n = frames.nrows();
    let d = frames.ncols();
    if k < 2 {
        return Err(MeldError::Config(format!("codebook needs K >= 2, got {k}")));
    }
    if n < k {
        return Err(MeldError::InvalidData(format!(
            "k-means needs at least K={k} frames, got {n}"
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(MeldError::InvalidData("non-finite frame in k-means".into()));
    }

    // k-means++ seeding: first center uniform, then D^2-weighted draws.
    let mut rng = rng::stream(seed, "kmeans", 0);
    let mut centers = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&frames.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| squared_dist(frames.row(i), centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.row_mut(c).assign(&frames.row(pick));
        for i in 0..n {
            let d2 = squared_dist(frames.row(i), centers.row(c));
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }

    // Lloyd iterations; ties go to the lower centroid index.
    let mut assign = vec![0usize; n];
    let mut trace = Vec::new();
    let mut prev_distortion = f64::INFINITY;
    for _ in 0..max_iters {
        let mut distortion = 0.0;
        for i in 0..n {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d2 = squared_dist(frames.row(i), centers.row(c));
                if d2 < best.1 {
                    best = (c, d2);
                }
            }
            assign[i] = best.0;
            distortion += best.1;
        }
        trace.push(distortion);
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for j in 0..d {
                sums[[c, j]] += frames[[i, j]];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[[c, j]] = sums[[c, j]] / counts[c] as f64;
                }
            } else {
                // Re-seed an empty cluster at the point farthest from its
                // assigned centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = squared_dist(frames.row(a), centers.row(assign[a]));
                        let db = squared_dist(frames.row(b), centers.row(assign[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers.row_mut(c).assign(&frames.row(far));
            }
        }
        if prev_distortion.is_finite() {
            let rel = (prev_distortion - distortion).abs() / prev_distortion.max(1e-30);
            if rel < 1e-6 {
                break;
            }
        }
        prev_distortion = distortion;
    }
    let codewords = centers.mapv(|v| v as f32 as f64);
    Ok((
        Codebook {
            codewords,
            tau: 1.0,
            seed,
            frozen: true,
        },
        trace,
    ))
}

/// Evaluate q(z | x) of the soft-VQ posterior with max-subtraction.
pub fn soft_assign(cb: &Codebook, frame: ArrayView1<f64>) -> Result<SoftAssignment> {
    if frame.len() != cb.dim() {
        return Err(MeldError::ShapeMismatch(format!(
            "frame dim {} vs codebook dim {}",
            frame.len(),
            cb.dim()
        )));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(MeldError::InvalidData("non-finite frame".into()));
    }
    let logits: Vec<f64> = (0..cb.k())
        .map(|k| -squared_dist(frame, cb.codeword(k)) / cb.tau)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(SoftAssignment {
        probs: exps.into_iter().map(|e| e / z).collect(),
    })
}

/// Draw z ~ q(z | x). Deterministic for a fixed rng state.
pub fn sample_latent<R: Rng>(cb: &Codebook, frame: ArrayView1<f64>, rng: &mut R) -> Result<usize> {
    let a = soft_assign(cb, frame)?;
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (k, &p) in a.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(k);
        }
    }
    Ok(a.probs.len() - 1)
}

/// Shannon entropy of an assignment in nats, with 0 * log 0 = 0.
pub fn assignment_entropy(a: &SoftAssignment) -> f64 {
    a.probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

// ---------------------------------------------------------------------------
// serialization: one-line JSON header, then K * d little-endian f32
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    k: usize,
    d: usize,
    tau: f64,
    seed: u64,
}

pub fn save_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = CodebookHeader {
        k: cb.k(),
        d: cb.dim(),
        tau: cb.tau,
        seed: cb.seed,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in cb.codewords.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        if b[0] == b'\n' {
            break;
        }
        header_bytes.push(b[0]);
    }
    let header: CodebookHeader = serde_json::from_slice(&header_bytes)?;
    let mut payload = vec![0u8; header.k * header.d * 4];
    r.read_exact(&mut payload)?;
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let codewords = Array2::from_shape_vec((header.k, header.d), values)
        .map_err(|e| MeldError::ShapeMismatch(e.to_string()))?;
    if codewords.iter().any(|v| !v.is_finite()) {
        return Err(MeldError::InvalidData("non-finite codeword".into()));
    }
    if header.k < 2 {
        return Err(MeldError::InvalidData("codebook needs K >= 2".into()));
    }
    Ok(Codebook {
        codewords,
        tau: header.tau,
        seed: header.seed,
        frozen: true,
    })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
