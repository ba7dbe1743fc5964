//! Autoregressive decoding: zero-shot TTS continuation and STT beam search.
//!
//! TTS feeds each SpecNet frame straight back as the next input; the
//! convolutional postnet refines the completed continuation once at the end.
//! Prompt frames are teacher-forced ground truth. STT runs a
//! length-normalized beam over text ids with latent ids masked out; with a
//! beam of one the search degenerates to greedy decoding exactly.

use ndarray::{Array2, ArrayView2, Ix2, s};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{MeldError, Result};
use crate::model::{BnUse, ForwardOpts, MeldModel, Mode, PostnetNorm, SequenceItem};
use crate::rng::stream;
use crate::vq::Codebook;

use super::sampling::{
    apply_repetition_penalty, filter_top_k_top_p, sample_index, GenerationConfig,
    GenerationTrace, StepSummary, Termination, TraceStep,
};

fn eval_bn(model: &MeldModel) -> BnUse {
    match model.config.postnet_norm {
        PostnetNorm::Running => BnUse::EvalRunning,
        PostnetNorm::Instance => BnUse::EvalInstance,
    }
}

fn last_row(tape: &Tape, v: crate::autodiff::Var) -> Vec<f64> {
    let value = tape.value(v).into_dimensionality::<Ix2>().expect("2-d output");
    value.row(value.nrows() - 1).to_vec()
}

/// Continue `prompt_mel` (normalized with training statistics, possibly
/// empty) conditioned on `text_ids`. Returns the postnet-refined
/// continuation, prompt excluded, plus the generation trace.
///
/// Each step recomputes the full context, so with test-time g_Mel dropout
/// active the earlier frames are re-embedded under fresh masks every step;
/// all draws come from the trace rng, keeping runs with equal seed and
/// config bit-identical.
pub fn generate_tts(
    model: &MeldModel,
    cb: &Codebook,
    text_ids: &[usize],
    prompt_mel: ArrayView2<f64>,
    cfg: &GenerationConfig,
) -> Result<(Array2<f64>, GenerationTrace)> {
    cfg.validate()?;
    if cfg.mode != Mode::Tts {
        return Err(MeldError::Config("generate_tts requires mode = tts".into()));
    }
    if text_ids.is_empty() {
        return Err(MeldError::InvalidData("empty text".into()));
    }
    let mcfg = &model.config;
    let vocab = mcfg.vocab;
    if cb.k() != vocab.k_latent {
        return Err(MeldError::Config(format!(
            "codebook size {} does not match vocabulary latents {}",
            cb.k(),
            vocab.k_latent
        )));
    }
    if prompt_mel.nrows() > 0 && prompt_mel.ncols() != mcfg.d_mel_in {
        return Err(MeldError::ShapeMismatch(format!(
            "prompt frame dim {} does not match d_mel_in {}",
            prompt_mel.ncols(),
            mcfg.d_mel_in
        )));
    }
    let initial_len = text_ids.len() + 1 + prompt_mel.nrows();
    if initial_len > mcfg.max_seq_len {
        return Err(MeldError::InvalidData(format!(
            "text plus prompt occupy {initial_len} positions, over the \
             max_seq_len budget {}",
            mcfg.max_seq_len
        )));
    }
    // The step sampling frame t runs a forward over initial_len + t - 1
    // positions, so the context budget caps the continuation length.
    let budget = mcfg.max_seq_len - initial_len + 1;
    let cap = cfg.max_frames.min(budget);

    let k = vocab.k_latent;
    let eos_local = k;
    let to_global = |j: usize| if j == eos_local { vocab.id_eos() } else { vocab.latent_id(j) };

    let mut rng = stream(cfg.seed, "generate-tts", 0);
    let mut frames = if prompt_mel.nrows() > 0 {
        prompt_mel.to_owned()
    } else {
        Array2::zeros((0, mcfg.d_mel_in))
    };
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut prev_candidates: Vec<usize> = Vec::new();
    let mut termination = Termination::MaxFrames;
    let mut emitted = 0usize;

    while emitted < cap {
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let item = SequenceItem::new(Mode::Tts, text_ids.to_vec(), frames.clone(), &vocab)?;
        let opts = ForwardOpts::eval(cfg.test_time_gmel_dropout);
        let pass = bound.forward(&item, opts, &mut rng)?;
        let full = last_row(&tape, pass.logits);

        // Restrict to latents plus <EOS>; local index k is <EOS>.
        let mut local: Vec<f64> = (0..k).map(|j| full[vocab.latent_id(j)]).collect();
        local.push(full[vocab.id_eos()]);
        if cfg.repetition_penalty_on {
            apply_repetition_penalty(&mut local, &prev_candidates, eos_local, cfg.rep_penalty_value);
        }
        let filtered = filter_top_k_top_p(&local, cfg.top_k, cfg.top_p);
        let choice = sample_index(&filtered.probs, &mut rng);

        let max_logit = local.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let candidate_entropy = filtered
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        steps.push(TraceStep {
            sampled_id: to_global(choice),
            candidates: filtered.candidates.iter().map(|&j| to_global(j)).collect(),
            summary: StepSummary {
                max_logit,
                chosen_logit: local[choice],
                candidate_entropy,
            },
        });

        if choice == eos_local {
            termination = Termination::Eos;
            break;
        }

        let len = item.seq_len();
        let h_last = tape.slice(pass.h, 0, len - 1, len);
        let xhat = bound.specnet(
            h_last,
            &[choice],
            cb,
            cfg.ablate_zero_codeword,
            cfg.test_time_gmel_dropout,
            &mut rng,
        )?;
        let row = tape.value(xhat).into_dimensionality::<Ix2>().expect("specnet row");
        frames
            .push_row(row.row(0))
            .expect("specnet width matches d_mel_in");
        emitted += 1;
        prev_candidates = filtered.candidates;
    }

    let continuation = frames.slice(s![prompt_mel.nrows().., ..]).to_owned();
    let refined = if continuation.nrows() == 0 {
        continuation
    } else {
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let xhat = tape.constant(continuation.clone().into_dyn());
        let (residual, _) = bound.postnet(xhat, eval_bn(model));
        let residual = tape.value(residual).into_dimensionality::<Ix2>().expect("postnet shape");
        &continuation + &residual
    };

    let trace = GenerationTrace { steps, termination };
    debug_assert_eq!(trace.n_frames(), refined.nrows());
    debug_assert!(trace.validate(&vocab).is_ok());
    Ok((refined, trace))
}

/// Winning STT hypothesis: text ids (no latents, no specials) and the
/// length-normalized log probability under the mode-masked next-token
/// distribution. `ended_with_eos` is false only when the context budget cut
/// the hypothesis before it terminated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcription {
    pub text_ids: Vec<usize>,
    pub score: f64,
    pub ended_with_eos: bool,
}

struct Hyp {
    ids: Vec<usize>,
    sum: f64,
}

/// Length-normalized beam search over text ids for the mel input. Latent
/// ids are masked out and dropout (g_Mel included) is off, so the search is
/// deterministic. A beam of one reproduces greedy decoding; the search
/// stops once `beam_size` hypotheses have finished.
pub fn transcribe_beam(
    model: &MeldModel,
    mel: ArrayView2<f64>,
    beam_size: usize,
) -> Result<Transcription> {
    if beam_size == 0 {
        return Err(MeldError::Config("beam_size must be at least 1".into()));
    }
    if mel.nrows() == 0 {
        return Err(MeldError::InvalidData("empty mel".into()));
    }
    let mcfg = &model.config;
    let vocab = mcfg.vocab;
    if mel.ncols() != mcfg.d_mel_in {
        return Err(MeldError::ShapeMismatch(format!(
            "mel frame dim {} does not match d_mel_in {}",
            mel.ncols(),
            mcfg.d_mel_in
        )));
    }
    if mel.nrows() + 1 > mcfg.max_seq_len {
        return Err(MeldError::InvalidData(format!(
            "mel of {} frames leaves no room in the max_seq_len budget {}",
            mel.nrows(),
            mcfg.max_seq_len
        )));
    }
    let max_text = mcfg.max_seq_len - mel.nrows() - 1;

    // Dropout is inactive on every path, so the rng is never consumed.
    let mut rng = stream(0, "transcribe", 0);
    let allowed: Vec<usize> = (0..vocab.v_text).chain([vocab.id_eos()]).collect();

    let mut active = vec![Hyp { ids: Vec::new(), sum: 0.0 }];
    // (ids, normalized score, ended with eos)
    let mut finished: Vec<(Vec<usize>, f64, bool)> = Vec::new();

    while !active.is_empty() && finished.len() < beam_size {
        let mut children: Vec<(usize, usize, f64)> = Vec::new();
        for (parent, hyp) in active.iter().enumerate() {
            let item = SequenceItem::new(Mode::Stt, hyp.ids.clone(), mel.to_owned(), &vocab)?;
            let tape = Tape::new();
            let bound = model.bind_frozen(&tape);
            let pass = bound.forward(&item, ForwardOpts::eval(false), &mut rng)?;
            let row = last_row(&tape, pass.logits);

            // Log-softmax restricted to text ids plus <EOS>.
            let max = allowed.iter().map(|&a| row[a]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = allowed.iter().map(|&a| (row[a] - max).exp()).sum();
            let log_z = max + z.ln();
            for &a in &allowed {
                children.push((parent, a, hyp.sum + row[a] - log_z));
            }
        }
        children.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        children.truncate(beam_size);

        let mut next = Vec::new();
        for (parent, tok, sum) in children {
            let mut ids = active[parent].ids.clone();
            if tok == vocab.id_eos() {
                let len = ids.len() + 1;
                finished.push((ids, sum / len as f64, true));
            } else {
                ids.push(tok);
                if ids.len() == max_text {
                    finished.push((ids, sum / max_text as f64, false));
                } else {
                    next.push(Hyp { ids, sum });
                }
            }
        }
        active = next;
    }

    finished.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (ids, score, eos) = finished.into_iter().next().expect("beam always finishes");
    debug_assert!(ids.iter().all(|&id| vocab.is_text(id)));
    Ok(Transcription { text_ids: ids, score, ended_with_eos: eos })
}

/// Aggregate duration accounting over a batch of generation traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationReport {
    pub n_traces: usize,
    pub total_frames: usize,
    pub total_seconds: f64,
    pub total_minutes: f64,
    /// Termination histogram.
    pub n_eos: usize,
    pub n_max_frames: usize,
}

/// Sum generated audio time (frames times `hop_s` seconds) and count
/// termination reasons. At the 16 ms hop one 625-frame trace is ten
/// seconds.
pub fn duration_report(traces: &[GenerationTrace], hop_s: f64) -> Result<DurationReport> {
    if traces.is_empty() {
        return Err(MeldError::InvalidData("duration report needs at least one trace".into()));
    }
    if !(hop_s > 0.0 && hop_s.is_finite()) {
        return Err(MeldError::Config(format!("hop length {hop_s} must be positive")));
    }
    let mut report = DurationReport {
        n_traces: traces.len(),
        total_frames: 0,
        total_seconds: 0.0,
        total_minutes: 0.0,
        n_eos: 0,
        n_max_frames: 0,
    };
    for trace in traces {
        report.total_frames += trace.n_frames();
        match trace.termination {
            Termination::Eos => report.n_eos += 1,
            Termination::MaxFrames => report.n_max_frames += 1,
        }
    }
    report.total_seconds = report.total_frames as f64 * hop_s;
    report.total_minutes = report.total_seconds / 60.0;
    Ok(report)
}
