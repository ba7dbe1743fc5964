//! Training losses: the variational bound with its KL cross-entropy/entropy
//! decomposition, the two-stage reconstruction MSE, the STT cross-entropy,
//! and the slowness penalty.
//!
//! Conventions. The KL term uses the full soft assignment q as the target
//! (the sampled z_t feeds only the reconstruction path). q is computed
//! outside the tape and is constant with respect to parameters (the codebook
//! is frozen), so its entropy appears in reports but contributes no
//! gradient. Losses are normalized as means over target positions; each item
//! report also carries its counts so a batch can pool them exactly. The
//! reported `vlb_total` satisfies
//! `vlb_total * n_target_positions = kl_term * T + reconstruction_mse * T + eos_ce`.
//!
//! The optimized reconstruction term is the plain sum of squared errors of
//! both stages (the Gaussian normalization constants and the 1/2 factors are
//! parameter-independent and dropped); [`two_stage_gaussian_nll`] restores
//! them for bound checks against exact marginals.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{MeldError, Result};
use crate::model::{BnUse, BoundModel, ForwardOpts, Mode, PostnetNorm, SequenceItem};
use crate::text::UnifiedVocab;
use crate::vq::{assignment_entropy, soft_assign, Codebook, SoftAssignment};

/// Relative weights of the loss components. The paper states no KL-to-
/// reconstruction ratio (1:1 as written in the bound) and a slowness weight
/// of 0.2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub kl: f64,
    pub recon: f64,
    pub slow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kl: 1.0,
            recon: 1.0,
            slow: 0.2,
        }
    }
}

/// Scalar diagnostics for one item or a pooled batch. Component fields are
/// means over their own targets (`kl_term`, `reconstruction_mse`, and
/// `entropy_q` per mel frame; `stt_ce` per text target; `eos_ce` per TTS
/// end-of-sequence target); `vlb_total` and `weighted_total` are means over
/// all target positions.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct LossReport {
    pub vlb_total: f64,
    pub kl_term: f64,
    pub reconstruction_mse: f64,
    pub entropy_q: f64,
    pub eos_ce: f64,
    pub stt_ce: f64,
    pub slowness: f64,
    pub weighted_total: f64,
    pub n_latent_targets: usize,
    pub n_text_targets: usize,
    pub n_eos_targets: usize,
    pub n_target_positions: usize,
}

impl LossReport {
    fn zeros() -> Self {
        Self {
            vlb_total: 0.0,
            kl_term: 0.0,
            reconstruction_mse: 0.0,
            entropy_q: 0.0,
            eos_ce: 0.0,
            stt_ce: 0.0,
            slowness: 0.0,
            weighted_total: 0.0,
            n_latent_targets: 0,
            n_text_targets: 0,
            n_eos_targets: 0,
            n_target_positions: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.vlb_total,
            self.kl_term,
            self.reconstruction_mse,
            self.entropy_q,
            self.eos_ce,
            self.stt_ce,
            self.slowness,
            self.weighted_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Count-weighted pooling of per-item reports into one batch report.
pub fn pool_reports(reports: &[LossReport]) -> LossReport {
    let mut out = LossReport::zeros();
    for r in reports {
        out.n_latent_targets += r.n_latent_targets;
        out.n_text_targets += r.n_text_targets;
        out.n_eos_targets += r.n_eos_targets;
        out.n_target_positions += r.n_target_positions;
    }
    let frac = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    let mut acc = [0.0f64; 8];
    for r in reports {
        acc[0] += r.vlb_total * r.n_target_positions as f64;
        acc[1] += r.kl_term * r.n_latent_targets as f64;
        acc[2] += r.reconstruction_mse * r.n_latent_targets as f64;
        acc[3] += r.entropy_q * r.n_latent_targets as f64;
        acc[4] += r.eos_ce * r.n_eos_targets as f64;
        acc[5] += r.stt_ce * r.n_text_targets as f64;
        acc[6] += r.slowness * r.n_latent_targets as f64;
        acc[7] += r.weighted_total * r.n_target_positions as f64;
    }
    out.vlb_total = frac(acc[0], out.n_target_positions);
    out.kl_term = frac(acc[1], out.n_latent_targets);
    out.reconstruction_mse = frac(acc[2], out.n_latent_targets);
    out.entropy_q = frac(acc[3], out.n_latent_targets);
    out.eos_ce = frac(acc[4], out.n_eos_targets);
    out.stt_ce = frac(acc[5], out.n_text_targets);
    out.slowness = frac(acc[6], out.n_latent_targets);
    out.weighted_total = frac(acc[7], out.n_target_positions);
    out
}

// ---------------------------------------------------------------------------
// scalar loss pieces
// ---------------------------------------------------------------------------

/// Soft-target cross-entropy `-sum_k q_k log p_k` over the latent slice.
pub fn cross_entropy_soft(q: &SoftAssignment, log_p_latents: ArrayView1<f64>) -> f64 {
    assert_eq!(
        q.probs.len(),
        log_p_latents.len(),
        "q and log p latent sizes differ"
    );
    -q.probs
        .iter()
        .zip(log_p_latents.iter())
        .map(|(&qk, &lp)| if qk == 0.0 { 0.0 } else { qk * lp })
        .sum::<f64>()
}

/// `KL(q || p)` computed as cross-entropy minus entropy over an already
/// restricted latent log-distribution.
pub fn kl_q_p_latents(q: &SoftAssignment, log_p_latents: ArrayView1<f64>) -> f64 {
    cross_entropy_soft(q, log_p_latents) - assignment_entropy(q)
}

/// `KL(q || p)` where `log_p_full` spans the unified vocabulary; the latent
/// slice is taken without renormalization, so mass the model leaks onto text
/// ids is penalized through the cross-entropy.
pub fn kl_q_p(q: &SoftAssignment, log_p_full: ArrayView1<f64>, vocab: &UnifiedVocab) -> f64 {
    assert_eq!(log_p_full.len(), vocab.total(), "log_p length");
    let lat = log_p_full.slice(ndarray::s![vocab.v_text..vocab.v_text + vocab.k_latent]);
    kl_q_p_latents(q, lat)
}

/// Two-stage reconstruction error, Eq-style: mean over frames of
/// `|x - x_hat|^2 + |x - x_post|^2` where `x_post = x_hat + conv(x_hat)`.
pub fn reconstruction_mse(
    x: ArrayView2<f64>,
    xhat: ArrayView2<f64>,
    xpost: ArrayView2<f64>,
) -> Result<f64> {
    if x.dim() != xhat.dim() || x.dim() != xpost.dim() {
        return Err(MeldError::ShapeMismatch(format!(
            "reconstruction shapes differ: {:?} vs {:?} vs {:?}",
            x.dim(),
            xhat.dim(),
            xpost.dim()
        )));
    }
    let t = x.nrows();
    if t == 0 {
        return Err(MeldError::EmptyInput("reconstruction over zero frames".into()));
    }
    let mut total = 0.0;
    for ti in 0..t {
        for j in 0..x.ncols() {
            let d1 = x[[ti, j]] - xhat[[ti, j]];
            let d2 = x[[ti, j]] - xpost[[ti, j]];
            total += d1 * d1 + d2 * d2;
        }
    }
    Ok(total / t as f64)
}

/// Slowness penalty: the negated mean squared difference of consecutive
/// predicted frames; zero for fewer than two frames. Never positive.
pub fn slowness_penalty(xhat: ArrayView2<f64>) -> f64 {
    let t = xhat.nrows();
    if t < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for ti in 0..t - 1 {
        for j in 0..xhat.ncols() {
            let d = xhat[[ti, j]] - xhat[[ti + 1, j]];
            total += d * d;
        }
    }
    -total / (t - 1) as f64
}

/// Exact negative log of the two-Gaussian reconstruction likelihood
/// `N(x; x_hat, I) N(x; x_post, I)` for one frame, constants included.
pub fn two_stage_gaussian_nll(
    x: ArrayView1<f64>,
    xhat: ArrayView1<f64>,
    xpost: ArrayView1<f64>,
) -> f64 {
    assert_eq!(x.len(), xhat.len());
    assert_eq!(x.len(), xpost.len());
    let d = x.len() as f64;
    let ss1: f64 = x.iter().zip(xhat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let ss2: f64 = x.iter().zip(xpost.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * ss1 + 0.5 * ss2 + d * (2.0 * std::f64::consts::PI).ln()
}

fn sample_index(probs: ArrayView1<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// end-to-end item losses
// ---------------------------------------------------------------------------

/// A differentiable item loss plus its report. `bn_updates` is non-empty
/// only for training-mode TTS (postnet batch norm ran on batch statistics).
pub struct ItemLoss {
    pub loss: Var,
    pub report: LossReport,
    pub bn_updates: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// TTS objective for one item: soft-target KL at every frame position, the
/// sampled-z two-stage reconstruction, a hard `<EOS>` cross-entropy at the
/// final position, and the weighted slowness penalty.
pub fn tts_loss(
    bound: &BoundModel,
    item: &SequenceItem,
    cb: &Codebook,
    weights: &LossWeights,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ItemLoss> {
    if item.mode != Mode::Tts {
        return Err(MeldError::InvalidData("tts_loss on a non-TTS item".into()));
    }
    let t_frames = item.n_frames();
    if t_frames == 0 || item.text_ids.is_empty() {
        return Err(MeldError::EmptyInput("TTS item needs text and frames".into()));
    }
    let cfg = &bound.model.config;
    let tape = bound.tape;
    // Posterior q per frame: analytic, frozen, off-tape.
    let mut q_mat = Array2::zeros((t_frames, cb.k()));
    let mut entropy_sum = 0.0;
    for ti in 0..t_frames {
        let a = soft_assign(cb, item.frames.row(ti))?;
        entropy_sum += assignment_entropy(&a);
        for (k, &p) in a.probs.iter().enumerate() {
            q_mat[[ti, k]] = p;
        }
    }

    let opts = if train {
        ForwardOpts::train_tts()
    } else {
        ForwardOpts::eval(false)
    };
    let out = bound.forward(item, opts, rng)?;
    let range = item.target_range();
    let rows = tape.slice(out.logits, 0, range.start, range.end);
    let log_p = tape.log_softmax_last(rows);
    let frame_log_p = tape.slice(log_p, 0, 0, t_frames);
    let lat_log_p = tape.slice(
        frame_log_p,
        1,
        cfg.vocab.v_text,
        cfg.vocab.v_text + cfg.vocab.k_latent,
    );
    let q_const = tape.constant(q_mat.clone().into_dyn());
    let ce_sum = tape.scale(tape.sum_all(tape.mul(q_const, lat_log_p)), -1.0);
    let kl_sum = tape.sub(ce_sum, tape.scalar(entropy_sum));

    let eos_log_p = tape.slice(log_p, 0, t_frames, t_frames + 1);
    let eos_pick = tape.pick_last(eos_log_p, &[cfg.vocab.id_eos()]);
    let eos_ce = tape.scale(tape.sum_all(eos_pick), -1.0);

    // Reconstruction path: h rows that predicted z_1..z_T, sampled latents.
    let h_rows = tape.slice(out.h, 0, range.start, range.start + t_frames);
    let z: Vec<usize> = (0..t_frames)
        .map(|ti| sample_index(q_mat.row(ti), rng))
        .collect();
    let xhat = bound.specnet(h_rows, &z, cb, false, opts.gmel_dropout_active, rng)?;
    let bn = if train {
        BnUse::TrainBatch
    } else {
        match cfg.postnet_norm {
            PostnetNorm::Running => BnUse::EvalRunning,
            PostnetNorm::Instance => BnUse::EvalInstance,
        }
    };
    let (residual, bn_updates) = bound.postnet(xhat, bn);
    let xpost = tape.add(xhat, residual);
    let x_const = tape.constant(item.frames.clone().into_dyn());
    let d1 = tape.sub(xhat, x_const);
    let d2 = tape.sub(xpost, x_const);
    let recon_sum = tape.add(tape.sum_all(tape.mul(d1, d1)), tape.sum_all(tape.mul(d2, d2)));

    let slowness = if t_frames >= 2 {
        let a = tape.slice(xhat, 0, 0, t_frames - 1);
        let b = tape.slice(xhat, 0, 1, t_frames);
        let d = tape.sub(a, b);
        tape.scale(tape.sum_all(tape.mul(d, d)), -1.0 / (t_frames - 1) as f64)
    } else {
        tape.scalar(0.0)
    };

    let n_targets = t_frames + 1;
    let weighted_sum = tape.add(
        tape.add(tape.scale(kl_sum, weights.kl), tape.scale(recon_sum, weights.recon)),
        eos_ce,
    );
    let loss = tape.add(
        tape.scale(weighted_sum, 1.0 / n_targets as f64),
        tape.scale(slowness, weights.slow),
    );

    let kl_v = tape.scalar_value(kl_sum);
    let recon_v = tape.scalar_value(recon_sum);
    let eos_v = tape.scalar_value(eos_ce);
    let slow_v = tape.scalar_value(slowness);
    let report = LossReport {
        vlb_total: (kl_v + recon_v + eos_v) / n_targets as f64,
        kl_term: kl_v / t_frames as f64,
        reconstruction_mse: recon_v / t_frames as f64,
        entropy_q: entropy_sum / t_frames as f64,
        eos_ce: eos_v,
        stt_ce: 0.0,
        slowness: slow_v,
        weighted_total: tape.scalar_value(loss),
        n_latent_targets: t_frames,
        n_text_targets: 0,
        n_eos_targets: 1,
        n_target_positions: n_targets,
    };
    Ok(ItemLoss {
        loss,
        report,
        bn_updates,
    })
}

/// STT objective for one item: hard cross-entropy on the shifted text ids
/// plus `<EOS>`, averaged over text target positions. g_Mel dropout is
/// deactivated in this mode.
pub fn stt_loss(
    bound: &BoundModel,
    item: &SequenceItem,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ItemLoss> {
    if item.mode != Mode::Stt {
        return Err(MeldError::InvalidData("stt_loss on a non-STT item".into()));
    }
    if item.n_frames() == 0 {
        return Err(MeldError::EmptyInput("STT item needs frames".into()));
    }
    let cfg = &bound.model.config;
    let tape = bound.tape;
    let opts = if train {
        ForwardOpts::train_stt()
    } else {
        ForwardOpts::eval(false)
    };
    let out = bound.forward(item, opts, rng)?;
    let range = item.target_range();
    let targets = item.stt_targets(&cfg.vocab);
    let rows = tape.slice(out.logits, 0, range.start, range.end);
    let log_p = tape.log_softmax_last(rows);
    let picked = tape.pick_last(log_p, &targets);
    let loss = tape.scale(tape.mean_all(picked), -1.0);
    let n_targets = targets.len();
    let ce = tape.scalar_value(loss);
    let report = LossReport {
        stt_ce: ce,
        weighted_total: ce,
        n_text_targets: n_targets,
        n_target_positions: n_targets,
        ..LossReport::zeros()
    };
    Ok(ItemLoss {
        loss,
        report,
        bn_updates: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check, Tape};
    use crate::model::{MeldModel, ModelConfig};
    use crate::text::make_unified_vocab;
    use crate::vq::kmeans_fit;
    use ndarray::{array, Array1, Array2};

    fn rng_for(tag: &str) -> ChaCha8Rng {
        crate::rng::stream(11, tag, 0)
    }

    fn assignment(probs: Vec<f64>) -> SoftAssignment {
        SoftAssignment { probs }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let q = assignment(vec![0.3, 0.2, 0.5]);
        let log_p: Array1<f64> = q.probs.iter().map(|p| p.ln()).collect();
        assert!(kl_q_p_latents(&q, log_p.view()).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_value_ln_two() {
        let q = assignment(vec![1.0, 0.0]);
        let log_p = array![0.5f64.ln(), 0.5f64.ln()];
        let kl = kl_q_p_latents(&q, log_p.view());
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn kl_nonnegative_and_matches_direct_formula() {
        let mut rng = rng_for("kl");
        for _ in 0..100 {
            let k = rng.random_range(2..9);
            let draw = |rng: &mut ChaCha8Rng| {
                let mut v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let q = assignment(draw(&mut rng));
            let p = draw(&mut rng);
            let log_p = Array1::from_vec(p.iter().map(|x| x.ln()).collect());
            let kl = kl_q_p_latents(&q, log_p.view());
            let direct: f64 = q
                .probs
                .iter()
                .zip(p.iter())
                .map(|(&qk, &pk)| if qk == 0.0 { 0.0 } else { qk * (qk.ln() - pk.ln()) })
                .sum();
            assert!(kl >= -1e-12, "KL {kl} negative");
            assert!((kl - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_full_vocab_restriction() {
        let vocab = make_unified_vocab(4, 3).unwrap();
        let q = assignment(vec![0.6, 0.3, 0.1]);
        // Log-probabilities over 10 ids; only ids 4..7 matter.
        let mut logits = Array1::zeros(vocab.total());
        for (i, v) in logits.iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let max = logits.fold(f64::NEG_INFINITY, |a: f64, &b| a.max(b));
        let norm = logits.mapv(|v| (v - max).exp()).sum().ln() + max;
        let log_p = logits.mapv(|v| v - norm);
        let direct = kl_q_p_latents(&q, log_p.slice(ndarray::s![4..7]));
        assert!((kl_q_p(&q, log_p.view(), &vocab) - direct).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_examples() {
        let mut rng = rng_for("recon");
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        // Perfect two-stage prediction.
        assert_eq!(reconstruction_mse(x.view(), x.view(), x.view()).unwrap(), 0.0);
        // conv residual identically one in every dim: second stage misses by
        // the all-ones vector, so the loss is d.
        let post = &x + 1.0;
        let loss = reconstruction_mse(x.view(), x.view(), post.view()).unwrap();
        assert!((loss - 3.0).abs() < 1e-12);
        // Frame permutation applied to all three arguments is invariant.
        let xhat = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let xpost = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let base = reconstruction_mse(x.view(), xhat.view(), xpost.view()).unwrap();
        let perm = [4, 2, 0, 1, 3];
        let p = |a: &Array2<f64>| {
            let mut out = Array2::zeros(a.raw_dim());
            for (dst, &src) in perm.iter().enumerate() {
                out.row_mut(dst).assign(&a.row(src));
            }
            out
        };
        let permuted = reconstruction_mse(p(&x).view(), p(&xhat).view(), p(&xpost).view()).unwrap();
        assert!((base - permuted).abs() < 1e-12);
        // Shape mismatch is a data error.
        let short = Array2::zeros((4, 3));
        assert!(reconstruction_mse(x.view(), short.view(), x.view()).is_err());
    }

    #[test]
    fn slowness_examples() {
        let constant = Array2::from_elem((6, 4), 0.8);
        assert_eq!(slowness_penalty(constant.view()), 0.0);
        let two = array![[0.0], [1.0]];
        assert!((slowness_penalty(two.view()) + 1.0).abs() < 1e-12);
        let single = Array2::zeros((1, 4));
        assert_eq!(slowness_penalty(single.view()), 0.0);
        let mut rng = rng_for("slow");
        for _ in 0..20 {
            let x = Array2::from_shape_fn((7, 3), |_| rng.random_range(-2.0..2.0));
            assert!(slowness_penalty(x.view()) <= 0.0);
        }
    }

    #[test]
    fn sampled_reconstruction_estimator_is_unbiased() {
        // Small enumerable toy: E over resampled z of nll(x|z) must match
        // sum_k q_k nll_k within 3 sigma.
        let mut rng = rng_for("unbiased");
        let data = Array2::from_shape_fn((30, 1), |_| rng.random_range(-1.0..1.0));
        let cb = kmeans_fit(data.view(), 3, 50, 5).unwrap();
        let x = array![0.37];
        let q = soft_assign(&cb, x.view()).unwrap();
        let nll_k: Vec<f64> = (0..cb.k())
            .map(|k| {
                let c = cb.codeword(k).to_owned();
                two_stage_gaussian_nll(x.view(), c.view(), c.view())
            })
            .collect();
        let exact: f64 = q.probs.iter().zip(nll_k.iter()).map(|(a, b)| a * b).sum();
        let second: f64 = q.probs.iter().zip(nll_k.iter()).map(|(a, b)| a * b * b).sum();
        let var = (second - exact * exact).max(0.0);
        let probs = Array1::from_vec(q.probs.clone());
        let n = 10_000;
        let mean = (0..n)
            .map(|_| nll_k[sample_index(probs.view(), &mut rng)])
            .sum::<f64>()
            / n as f64;
        let sigma = (var / n as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * sigma + 1e-12,
            "mean {mean} vs exact {exact} (sigma {sigma})"
        );
    }

    const D_MEL: usize = 6;

    fn toy_config(v_text: usize, k: usize) -> ModelConfig {
        let vocab = make_unified_vocab(v_text, k).unwrap();
        let mut cfg = ModelConfig::desk(D_MEL, vocab);
        cfg.d_model = 16;
        cfg.d_ffn = 24;
        cfg.n_heads = 2;
        cfg.max_seq_len = 48;
        cfg.postnet_channels = 4;
        cfg
    }

    fn toy_codebook(k: usize, d: usize, seed: u64) -> Codebook {
        let mut rng = crate::rng::stream(seed, "obj-cb", 0);
        let data = Array2::from_shape_fn((40.max(4 * k), d), |_| rng.random_range(-1.0..1.0));
        kmeans_fit(data.view(), k, 60, seed).unwrap()
    }

    fn toy_item(cfg: &ModelConfig, mode: Mode, m: usize, t: usize, seed: u64) -> SequenceItem {
        let mut rng = crate::rng::stream(seed, "obj-item", 0);
        let ids = (0..m).map(|i| i % cfg.vocab.v_text).collect();
        let frames = Array2::from_shape_fn((t, D_MEL), |_| rng.random_range(-1.0..1.0));
        SequenceItem::new(mode, ids, frames, &cfg.vocab).unwrap()
    }

    #[test]
    fn tts_hand_value_on_one_frame_toy() {
        // Heads zeroed so logits are uniform and both reconstruction stages
        // output exactly zero; with one frame the loss has a closed form:
        //   vlb = [ (ln |V| - H(q)) + 2|x|^2 + ln |V| ] / 2.
        let cfg = toy_config(3, 2);
        let mut model = MeldModel::init(cfg.clone(), 21).unwrap();
        model.params.get_mut("head.weight").unwrap().fill(0.0);
        model.params.get_mut("head.bias").unwrap().fill(0.0);
        model.params.get_mut("specnet.lin.weight").unwrap().fill(0.0);
        model.params.get_mut("specnet.lin.bias").unwrap().fill(0.0);
        for l in 0..3 {
            model
                .params
                .get_mut(&format!("specnet.mlp.l{l}.weight"))
                .unwrap()
                .fill(0.0);
        }
        let cb = toy_codebook(2, D_MEL, 3);
        let item = toy_item(&cfg, Mode::Tts, 2, 1, 9);
        let q = soft_assign(&cb, item.frames.row(0)).unwrap();
        let h = assignment_entropy(&q);
        let x_sq: f64 = item.frames.row(0).iter().map(|v| v * v).sum();
        let ln_v = (cfg.vocab.total() as f64).ln();
        let expect_vlb = ((ln_v - h) + 2.0 * x_sq + ln_v) / 2.0;

        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = rng_for("hand");
        let out = tts_loss(
            &bound,
            &item,
            &cb,
            &LossWeights::default(),
            false,
            &mut rng,
        )
        .unwrap();
        assert!((out.report.vlb_total - expect_vlb).abs() < 1e-9);
        assert!((out.report.kl_term - (ln_v - h)).abs() < 1e-9);
        assert!((out.report.reconstruction_mse - 2.0 * x_sq).abs() < 1e-9);
        assert!((out.report.eos_ce - ln_v).abs() < 1e-9);
        assert_eq!(out.report.slowness, 0.0);
    }

    #[test]
    fn tts_report_identities() {
        let cfg = toy_config(5, 4);
        let model = MeldModel::init(cfg.clone(), 22).unwrap();
        let cb = toy_codebook(4, D_MEL, 4);
        let item = toy_item(&cfg, Mode::Tts, 3, 5, 11);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let mut rng = rng_for("ids");
        let w = LossWeights::default();
        let out = tts_loss(&bound, &item, &cb, &w, true, &mut rng).unwrap();
        let r = &out.report;
        assert!(r.is_finite());
        assert_eq!(r.n_latent_targets, 5);
        assert_eq!(r.n_target_positions, 6);
        // vlb_total * positions = kl_sum + recon_sum + eos.
        let lhs = r.vlb_total * r.n_target_positions as f64;
        let rhs = r.kl_term * 5.0 + r.reconstruction_mse * 5.0 + r.eos_ce;
        assert!((lhs - rhs).abs() < 1e-9);
        // weighted_total folds the slowness penalty (weights 1:1 here).
        let w_lhs = r.weighted_total;
        let w_rhs = r.vlb_total + w.slow * r.slowness;
        assert!((w_lhs - w_rhs).abs() < 1e-9);
        // Training-mode postnet produced running-stat updates.
        assert_eq!(out.bn_updates.len(), 3);
        assert!(out.bn_updates.iter().all(|u| u.is_some()));
    }

    #[test]
    fn stt_uniform_logits_give_log_vocab() {
        let cfg = toy_config(4, 3);
        let mut model = MeldModel::init(cfg.clone(), 23).unwrap();
        model.params.get_mut("head.weight").unwrap().fill(0.0);
        model.params.get_mut("head.bias").unwrap().fill(0.0);
        let item = toy_item(&cfg, Mode::Stt, 3, 4, 13);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = rng_for("stt-u");
        let out = stt_loss(&bound, &item, false, &mut rng).unwrap();
        let ln_v = (cfg.vocab.total() as f64).ln();
        assert!((out.report.stt_ce - ln_v).abs() < 1e-9);
        assert_eq!(out.report.n_text_targets, 4);
    }

    #[test]
    fn stt_dominant_target_logit_drives_loss_to_zero() {
        let cfg = toy_config(4, 3);
        let mut model = MeldModel::init(cfg.clone(), 24).unwrap();
        model.params.get_mut("head.weight").unwrap().fill(0.0);
        let bias = model.params.get_mut("head.bias").unwrap();
        bias.fill(0.0);
        bias[[cfg.vocab.id_eos()]] = 60.0;
        // Empty transcript: the only target is <EOS>.
        let mut rng0 = crate::rng::stream(1, "stt-one", 0);
        let frames = Array2::from_shape_fn((3, D_MEL), |_| rng0.random_range(-1.0..1.0));
        let item = SequenceItem::new(Mode::Stt, vec![], frames, &cfg.vocab).unwrap();
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = rng_for("stt-one");
        let out = stt_loss(&bound, &item, false, &mut rng).unwrap();
        assert!(out.report.stt_ce < 1e-9);
    }

    #[test]
    fn stt_targets_stay_out_of_latent_partition() {
        let cfg = toy_config(6, 4);
        let item = toy_item(&cfg, Mode::Stt, 4, 3, 17);
        for id in item.stt_targets(&cfg.vocab) {
            assert!(cfg.vocab.is_text(id) || id == cfg.vocab.id_eos());
            assert!(!cfg.vocab.is_latent(id));
        }
    }

    #[test]
    fn pooled_reports_weight_by_counts() {
        let mut a = LossReport::zeros();
        a.stt_ce = 2.0;
        a.weighted_total = 2.0;
        a.n_text_targets = 3;
        a.n_target_positions = 3;
        let mut b = LossReport::zeros();
        b.stt_ce = 5.0;
        b.weighted_total = 5.0;
        b.n_text_targets = 1;
        b.n_target_positions = 1;
        let pooled = pool_reports(&[a, b]);
        assert!((pooled.stt_ce - 2.75).abs() < 1e-12);
        assert_eq!(pooled.n_text_targets, 4);
    }

    #[test]
    fn tts_gradients_match_finite_differences() {
        let cfg = toy_config(4, 3);
        let model = MeldModel::init(cfg.clone(), 31).unwrap();
        let cb = toy_codebook(3, D_MEL, 7);
        let item = toy_item(&cfg, Mode::Tts, 2, 3, 19);
        let params = model.ordered_params();
        let report = fd_check(
            &params,
            |tape, vars| {
                let bound = model.bind_vars(tape, vars);
                let mut rng = crate::rng::stream(5, "fd-tts", 0);
                tts_loss(&bound, &item, &cb, &LossWeights::default(), true, &mut rng)
                    .unwrap()
                    .loss
            },
            1e-5,
            40,
            77,
        );
        assert!(report.max_rel_err < 1e-4, "{:?}", report.worst);
    }

    #[test]
    fn stt_gradients_match_finite_differences() {
        let cfg = toy_config(4, 3);
        let model = MeldModel::init(cfg.clone(), 32).unwrap();
        let item = toy_item(&cfg, Mode::Stt, 3, 4, 23);
        let params = model.ordered_params();
        let report = fd_check(
            &params,
            |tape, vars| {
                let bound = model.bind_vars(tape, vars);
                let mut rng = crate::rng::stream(6, "fd-stt", 0);
                stt_loss(&bound, &item, true, &mut rng).unwrap().loss
            },
            1e-5,
            40,
            78,
        );
        assert!(report.max_rel_err < 1e-4, "{:?}", report.worst);
    }
}
