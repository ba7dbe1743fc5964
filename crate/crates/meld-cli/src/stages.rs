//! The pipeline stages behind each subcommand. Every stage reads inputs
//! under the run directory, writes its outputs through the append-only
//! guards, and leaves a manifest of hashed inputs.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use meld_core::data::{
    generate_corpus, prompt_len, read_manifest, write_corpus, EncodedUtterance, ManifestEntry,
};
use meld_core::dsp::{
    extract_mel, fit_norm_stats, invert_mel_griffin_lim, normalize, read_mel_file, stack_frames,
    write_mel_file, write_wav, GriffinLimOptions, MelSpectrogram, NormStats,
};
use meld_core::eval::EvalReport;
use meld_core::infer::{
    duration_report, generate_tts, transcribe_beam, DurationReport, GenerationTrace,
};
use meld_core::model::checkpoint::{load_checkpoint, LoadedCheckpoint};
use meld_core::model::MeldModel;
use meld_core::text::{load_bpe, make_unified_vocab, save_bpe, train_bpe, BpeModel};
use meld_core::trainer::{self, TrainData};
use meld_core::vq::{kmeans_fit, load_codebook, save_codebook, Codebook};
use meld_core::autodiff::AdamState;

use crate::config::Resolved;
use crate::errors::{CliError, CliResult};
use crate::plot::{log_to_loss_csv, mel_to_pgm};
use crate::runs::{latest_checkpoint, RunDir, StageManifest};

/// Stage inputs must exist; report the missing relative path on failure.
fn require(run: &RunDir, rel: &str) -> CliResult<PathBuf> {
    let p = run.path(rel);
    if !p.exists() {
        return Err(CliError::validation(format!(
            "missing input `{rel}` under {} (run the producing stage first)",
            run.root.display()
        )));
    }
    Ok(p)
}

fn manifest_path(run: &RunDir, r: &Resolved) -> CliResult<PathBuf> {
    let rel = format!("{}/manifest.jsonl", r.cfg.paths.corpus);
    require(run, &rel)
}

fn entries(run: &RunDir, r: &Resolved) -> CliResult<Vec<ManifestEntry>> {
    Ok(read_manifest(&manifest_path(run, r)?)?)
}

fn feature_rel(r: &Resolved, utt_id: &str) -> String {
    format!("{}/{utt_id}.mel", r.cfg.paths.features)
}

fn load_feature(run: &RunDir, r: &Resolved, utt_id: &str) -> CliResult<MelSpectrogram> {
    let rel = feature_rel(r, utt_id);
    Ok(read_mel_file(&require(run, &rel)?)?)
}

fn load_norm_stats(run: &RunDir, r: &Resolved) -> CliResult<NormStats> {
    let rel = format!("{}/norm_stats.json", r.cfg.paths.features);
    let body = fs::read_to_string(require(run, &rel)?)?;
    Ok(serde_json::from_str(&body)?)
}

pub fn gen_corpus(run: &RunDir, r: &Resolved) -> CliResult<()> {
    let utts = generate_corpus(&r.cfg.synth, r.cfg.corpus.n_utterances)?;
    let dir = run.fresh_dir(&r.cfg.paths.corpus)?;
    write_corpus(&dir, &utts)?;

    let mut m = StageManifest::new("gen-corpus", r);
    m.output(&r.cfg.paths.corpus);
    run.write_manifest(&m)?;
    println!(
        "gen-corpus: {} utterances under {}",
        utts.len(),
        dir.display()
    );
    Ok(())
}

pub fn featurize(run: &RunDir, r: &Resolved) -> CliResult<()> {
    let manifest = manifest_path(run, r)?;
    let items = read_manifest(&manifest)?;
    if items.is_empty() {
        return Err(CliError::validation("corpus manifest lists no utterances"));
    }

    // Extraction is unstacked; stacking multiplies the config's factor, so
    // the extraction config must start from 1.
    let mut base = r.cfg.mel.clone();
    base.stack_factor = 1;
    let factor = r.cfg.mel.stack_factor;

    let mut stacked = Vec::with_capacity(items.len());
    for entry in &items {
        let wave = meld_core::data::load_entry_wave(&manifest, entry)?;
        let raw = extract_mel(&wave, &base)?;
        let mel = if factor > 1 {
            stack_frames(&raw, factor)?
        } else {
            raw
        };
        stacked.push(mel);
    }
    let views: Vec<ArrayView2<f64>> = stacked.iter().map(|m| m.frames.view()).collect();
    let stats = fit_norm_stats(&views)?;

    let dir = run.fresh_dir(&r.cfg.paths.features)?;
    for (entry, mel) in items.iter().zip(&stacked) {
        let normed = normalize(mel, &stats)?;
        write_mel_file(&dir.join(format!("{}.mel", entry.id)), &normed)?;
    }
    fs::write(
        dir.join("norm_stats.json"),
        serde_json::to_string_pretty(&stats)?,
    )?;

    let mut m = StageManifest::new("featurize", r);
    m.input(run, &r.cfg.paths.corpus)?;
    m.output(&r.cfg.paths.features);
    run.write_manifest(&m)?;
    println!(
        "featurize: {} mel files ({} manifest entries), frame dim {}",
        items.len(),
        items.len(),
        r.cfg.mel.frame_dim()
    );
    Ok(())
}

pub fn train_bpe_stage(run: &RunDir, r: &Resolved) -> CliResult<()> {
    let items = entries(run, r)?;
    let corpus: Vec<String> = items.iter().map(|e| e.transcript.clone()).collect();
    let model = train_bpe(&corpus, r.cfg.bpe.target_vocab)?;
    let out = run.fresh_path(&r.cfg.paths.bpe)?;
    save_bpe(&out, &model)?;

    let mut m = StageManifest::new("train-bpe", r);
    m.input(run, &r.cfg.paths.corpus)?;
    m.output(&r.cfg.paths.bpe);
    run.write_manifest(&m)?;
    println!(
        "train-bpe: vocab {} (target {}) from {} transcripts",
        model.vocab_size(),
        r.cfg.bpe.target_vocab,
        corpus.len()
    );
    Ok(())
}

pub fn kmeans_init(run: &RunDir, r: &Resolved) -> CliResult<()> {
    let items = entries(run, r)?;
    let d = r.cfg.mel.frame_dim();
    let mut pool: Vec<f64> = Vec::new();
    let mut total = 0usize;
    for entry in &items {
        let mel = load_feature(run, r, &entry.id)?;
        if mel.dim() != d {
            return Err(CliError::validation(format!(
                "feature {} has dim {}, config expects {d}",
                entry.id,
                mel.dim()
            )));
        }
        total += mel.num_frames();
        pool.extend(mel.frames.iter());
    }
    let all = Array2::from_shape_vec((total, d), pool)
        .map_err(|e| CliError::runtime(format!("frame pool: {e}")))?;

    // Evenly strided subsample: deterministic and order-stable, no RNG.
    let cap = r.cfg.vq.max_frames;
    let fit_frames = if total > cap {
        let mut sub = Array2::zeros((cap, d));
        for i in 0..cap {
            sub.row_mut(i).assign(&all.row(i * total / cap));
        }
        sub
    } else {
        all
    };

    let mut cb = kmeans_fit(
        fit_frames.view(),
        r.cfg.vq.k,
        r.cfg.vq.kmeans_iters,
        r.kmeans_seed(),
    )?;
    cb.tau = r.cfg.vq.tau;
    let out = run.fresh_path(&r.cfg.paths.codebook)?;
    save_codebook(&out, &cb)?;

    let mut m = StageManifest::new("kmeans-init", r);
    m.input(run, &r.cfg.paths.features)?;
    m.output(&r.cfg.paths.codebook);
    run.write_manifest(&m)?;
    println!(
        "kmeans-init: K={} dim={} fit on {}/{total} frames, codebook {}",
        cb.k(),
        cb.dim(),
        fit_frames.nrows(),
        &cb.content_hash()[..12]
    );
    Ok(())
}

fn load_encoded(run: &RunDir, r: &Resolved, bpe: &BpeModel) -> CliResult<Vec<EncodedUtterance>> {
    let items = entries(run, r)?;
    let mut out = Vec::with_capacity(items.len());
    for entry in &items {
        let mel = load_feature(run, r, &entry.id)?;
        out.push(EncodedUtterance {
            utt_id: entry.id.clone(),
            text_ids: bpe.encode(&entry.transcript).iter().map(|&t| t as usize).collect(),
            frames: mel.frames,
        });
    }
    Ok(out)
}

/// Model config implied by the run artifacts: mel front end, trained BPE
/// vocabulary, and the fitted codebook.
fn implied_model_config(
    r: &Resolved,
    bpe: &BpeModel,
    cb: &Codebook,
) -> CliResult<meld_core::model::ModelConfig> {
    let vocab = make_unified_vocab(bpe.vocab_size(), cb.k())?;
    Ok(r.cfg.model.to_model_config(r.cfg.mel.frame_dim(), vocab))
}

pub fn train_stage(run: &RunDir, r: &Resolved, resume: bool) -> CliResult<()> {
    let bpe = load_bpe(&require(run, &r.cfg.paths.bpe)?)?;
    let cb = load_codebook(&require(run, &r.cfg.paths.codebook)?)?;
    let data = TrainData {
        utterances: load_encoded(run, r, &bpe)?,
        max_frames_per_batch: r.cfg.batching.max_frames_per_batch,
        augment: r.cfg.augment.clone(),
        loss_weights: r.cfg.loss.clone(),
    };

    let (final_step, n_ckpts) = if resume {
        let ckpt_dir = require(run, &r.cfg.paths.checkpoints)?;
        let newest = latest_checkpoint(&ckpt_dir)?;
        let log_path = require(run, &r.cfg.paths.train_log)?;
        let mut log = fs::OpenOptions::new().append(true).open(log_path)?;
        let (_, _, out) = trainer::resume(
            &newest,
            &cb,
            &data,
            &r.cfg.train,
            Some(&ckpt_dir),
            Some(&mut log),
        )?;
        (out.final_step, out.checkpoints.len())
    } else {
        let cfg = implied_model_config(r, &bpe, &cb)?;
        let mut model = MeldModel::init(cfg, r.model_init_seed())?;
        let mut opt = AdamState::default();
        let ckpt_dir = run.fresh_dir(&r.cfg.paths.checkpoints)?;
        let log_path = run.fresh_path(&r.cfg.paths.train_log)?;
        let mut log = fs::File::create(log_path)?;
        let out = trainer::train(
            &mut model,
            &mut opt,
            &cb,
            &data,
            &r.cfg.train,
            0,
            Some(&ckpt_dir),
            Some(&mut log),
        )?;
        (out.final_step, out.checkpoints.len())
    };

    let mut m = StageManifest::new("train", r);
    m.input(run, &r.cfg.paths.features)?;
    m.input(run, &r.cfg.paths.bpe)?;
    m.input(run, &r.cfg.paths.codebook)?;
    m.output(&r.cfg.paths.checkpoints);
    m.output(&r.cfg.paths.train_log);
    run.write_manifest(&m)?;
    println!("train: reached step {final_step}, {n_ckpts} checkpoints");
    Ok(())
}

/// Resolve the checkpoint to decode with: an explicit path (relative to the
/// run dir) or the newest step in the checkpoint directory.
fn resolve_checkpoint(run: &RunDir, r: &Resolved, flag: Option<&str>) -> CliResult<PathBuf> {
    match flag {
        Some(rel) => require(run, rel),
        None => latest_checkpoint(&require(run, &r.cfg.paths.checkpoints)?),
    }
}

/// Load the decode bundle and verify the checkpoint belongs to this run's
/// artifacts.
fn load_bundle(
    run: &RunDir,
    r: &Resolved,
    flag: Option<&str>,
) -> CliResult<(LoadedCheckpoint, Codebook, BpeModel, PathBuf)> {
    let bpe = load_bpe(&require(run, &r.cfg.paths.bpe)?)?;
    let cb = load_codebook(&require(run, &r.cfg.paths.codebook)?)?;
    let path = resolve_checkpoint(run, r, flag)?;
    let loaded = load_checkpoint(&path)?;
    let expected = implied_model_config(r, &bpe, &cb)?;
    loaded.ensure_matches(&expected, &cb)?;
    Ok((loaded, cb, bpe, path))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceFile {
    config_hash: String,
    utt_id: String,
    prompt_frames: usize,
    trace: GenerationTrace,
}

#[derive(Debug, Serialize, Deserialize)]
struct DurationFile {
    config_hash: String,
    report: DurationReport,
}

pub fn synthesize(
    run: &RunDir,
    r: &Resolved,
    checkpoint: Option<&str>,
    emit_wav_flag: bool,
) -> CliResult<()> {
    let (loaded, cb, bpe, ckpt_path) = load_bundle(run, r, checkpoint)?;
    let model = loaded.model;
    let items = entries(run, r)?;
    let take = r.cfg.synthesis.n_utterances.min(items.len());
    let emit_wav = emit_wav_flag || r.cfg.synthesis.emit_wav;
    let stats = if emit_wav {
        Some(load_norm_stats(run, r)?)
    } else {
        None
    };

    let dir = run.fresh_dir(&r.cfg.paths.synthesis)?;
    let mut traces = Vec::with_capacity(take);
    for (idx, entry) in items.iter().take(take).enumerate() {
        let mel = load_feature(run, r, &entry.id)?;
        let n_prompt = prompt_len(mel.num_frames());
        let prompt = mel.frames.slice(ndarray::s![..n_prompt, ..]);
        let text_ids: Vec<usize> = bpe.encode(&entry.transcript).iter().map(|&t| t as usize).collect();

        let mut gen = r.cfg.generation.clone();
        gen.mode = meld_core::model::Mode::Tts;
        gen.seed = r.generation_seed_for(idx as u64);
        let (continuation, trace) = generate_tts(&model, &cb, &text_ids, prompt, &gen)?;

        let out_mel = MelSpectrogram {
            frames: continuation,
            config: mel.config.clone(),
            normalized: true,
        };
        write_mel_file(&dir.join(format!("{}.mel", entry.id)), &out_mel)?;
        let tf = TraceFile {
            config_hash: r.hash.clone(),
            utt_id: entry.id.clone(),
            prompt_frames: n_prompt,
            trace,
        };
        fs::write(
            dir.join(format!("{}.trace.json", entry.id)),
            serde_json::to_string_pretty(&tf)?,
        )?;
        if let Some(stats) = &stats {
            if out_mel.num_frames() > 0 {
                let wave = invert_mel_griffin_lim(
                    &out_mel,
                    stats,
                    meld_core::data::SYNTH_SAMPLE_RATE_HZ,
                    &GriffinLimOptions::default(),
                )?;
                write_wav(&dir.join(format!("{}.wav", entry.id)), &wave)?;
            }
        }
        traces.push(tf.trace);
    }

    let report = duration_report(&traces, r.frame_hop_seconds())?;
    fs::write(
        dir.join("duration.json"),
        serde_json::to_string_pretty(&DurationFile {
            config_hash: r.hash.clone(),
            report: report.clone(),
        })?,
    )?;

    let mut m = StageManifest::new("synthesize", r);
    m.input(run, &r.cfg.paths.features)?;
    m.input(run, &r.cfg.paths.bpe)?;
    m.input(run, &r.cfg.paths.codebook)?;
    let ckpt_rel = ckpt_path
        .strip_prefix(&run.root)
        .unwrap_or(&ckpt_path)
        .to_string_lossy()
        .into_owned();
    m.input(run, &ckpt_rel)?;
    m.output(&r.cfg.paths.synthesis);
    run.write_manifest(&m)?;
    println!(
        "synthesize: {take} continuations, {} frames total ({:.2} s audio)",
        report.total_frames, report.total_seconds
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub utt_id: String,
    pub hypothesis: String,
    pub score: f64,
    pub ended_with_eos: bool,
}

pub fn transcribe(run: &RunDir, r: &Resolved, checkpoint: Option<&str>) -> CliResult<()> {
    let (loaded, _cb, bpe, ckpt_path) = load_bundle(run, r, checkpoint)?;
    let model = loaded.model;
    let items = entries(run, r)?;

    let out_path = run.fresh_path(&r.cfg.paths.transcripts)?;
    let mut out = fs::File::create(&out_path)?;
    for entry in &items {
        let mel = load_feature(run, r, &entry.id)?;
        let t = transcribe_beam(&model, mel.frames.view(), r.cfg.generation.beam_size)?;
        // Sampled token runs need not align to UTF-8 boundaries; decode
        // lossily so every utterance yields a hypothesis string.
        let ids: Vec<u32> = t.text_ids.iter().map(|&i| i as u32).collect();
        let hypothesis = match bpe.decode_bytes(&ids) {
            Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Err(e) => return Err(e.into()),
        };
        let row = TranscriptRow {
            utt_id: entry.id.clone(),
            hypothesis,
            score: t.score,
            ended_with_eos: t.ended_with_eos,
        };
        writeln!(out, "{}", serde_json::to_string(&row)?)?;
    }

    let mut m = StageManifest::new("transcribe", r);
    m.input(run, &r.cfg.paths.features)?;
    m.input(run, &r.cfg.paths.bpe)?;
    m.input(run, &r.cfg.paths.codebook)?;
    let ckpt_rel = ckpt_path
        .strip_prefix(&run.root)
        .unwrap_or(&ckpt_path)
        .to_string_lossy()
        .into_owned();
    m.input(run, &ckpt_rel)?;
    m.output(&r.cfg.paths.transcripts);
    run.write_manifest(&m)?;
    println!("transcribe: {} hypotheses (beam {})", items.len(), r.cfg.generation.beam_size);
    Ok(())
}

#[derive(Debug, Serialize)]
struct FullEvalReport {
    config_hash: String,
    #[serde(flatten)]
    report: EvalReport,
}

pub fn eval_stage(run: &RunDir, r: &Resolved) -> CliResult<()> {
    let items = entries(run, r)?;
    let trans_path = require(run, &r.cfg.paths.transcripts)?;
    let mut rows = Vec::new();
    for line in fs::read_to_string(&trans_path)?.lines() {
        if line.is_empty() {
            continue;
        }
        let row: TranscriptRow = serde_json::from_str(line)?;
        let reference = items
            .iter()
            .find(|e| e.id == row.utt_id)
            .map(|e| e.transcript.clone())
            .ok_or_else(|| {
                CliError::validation(format!("transcript for unknown utterance {}", row.utt_id))
            })?;
        rows.push((row.utt_id, reference, row.hypothesis));
    }
    if rows.is_empty() {
        return Err(CliError::validation("no transcripts to evaluate"));
    }
    let mut report = EvalReport::from_rows(&rows)?;

    // Synthesis artifacts are optional: fold them in when present.
    let syn_dir = run.path(&r.cfg.paths.synthesis);
    if syn_dir.is_dir() {
        let dur_path = syn_dir.join("duration.json");
        if dur_path.exists() {
            let df: DurationFile = serde_json::from_str(&fs::read_to_string(dur_path)?)?;
            report.duration = Some(df.report);
        }
        let mut sims = Vec::new();
        for entry in &items {
            let cont_path = syn_dir.join(format!("{}.mel", entry.id));
            if !cont_path.exists() {
                continue;
            }
            let cont = read_mel_file(&cont_path)?;
            if cont.num_frames() == 0 {
                continue;
            }
            let full = load_feature(run, r, &entry.id)?;
            let n_prompt = prompt_len(full.num_frames());
            let prompt = full.frames.slice(ndarray::s![..n_prompt, ..]);
            sims.push(meld_core::eval::mel_stat_similarity(prompt, cont.frames.view())?);
        }
        if !sims.is_empty() {
            report.mel_similarity = Some(sims.iter().sum::<f64>() / sims.len() as f64);
        }
    }

    let out = run.fresh_path(&r.cfg.paths.eval)?;
    let full = FullEvalReport {
        config_hash: r.hash.clone(),
        report,
    };
    fs::write(&out, serde_json::to_string_pretty(&full)?)?;

    let mut m = StageManifest::new("eval", r);
    m.input(run, &r.cfg.paths.transcripts)?;
    m.output(&r.cfg.paths.eval);
    run.write_manifest(&m)?;
    println!(
        "eval: pooled WER {:.4} over {} utterances",
        full.report.pooled.wer,
        full.report.per_utterance.len()
    );
    Ok(())
}

pub fn inspect_checkpoint(run: &RunDir, r: &Resolved, checkpoint: Option<&str>) -> CliResult<()> {
    let path = resolve_checkpoint(run, r, checkpoint)?;
    let loaded = load_checkpoint(&path)?;
    println!("{}", serde_json::to_string_pretty(&loaded.header)?);
    Ok(())
}

pub fn plot(
    run: &RunDir,
    _r: &Resolved,
    mel: Option<&str>,
    log: Option<&str>,
    out: Option<&str>,
) -> CliResult<()> {
    match (mel, log) {
        (Some(rel), None) => {
            let mel = read_mel_file(&require(run, rel)?)?;
            let img = mel_to_pgm(mel.frames.view())?;
            let out_rel = out.map(str::to_string).unwrap_or_else(|| format!("{rel}.pgm"));
            let out_path = run.fresh_path(&out_rel)?;
            fs::write(&out_path, img)?;
            println!(
                "plot: {} -> {} ({} x {} px)",
                rel,
                out_rel,
                mel.dim(),
                mel.num_frames()
            );
        }
        (None, Some(rel)) => {
            let text = fs::read_to_string(require(run, rel)?)?;
            let csv = log_to_loss_csv(&text)?;
            let out_rel = out.map(str::to_string).unwrap_or_else(|| format!("{rel}.loss.csv"));
            let out_path = run.fresh_path(&out_rel)?;
            fs::write(&out_path, csv)?;
            println!("plot: {rel} -> {out_rel}");
        }
        _ => {
            return Err(CliError::validation(
                "plot needs exactly one of --mel FILE or --log FILE",
            ));
        }
    }
    Ok(())
}
