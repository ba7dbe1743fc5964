//! The MELD network: a decoder-only transformer over interleaved text/mel
//! sequences with a shared mel encoder `g_Mel`, a unified output head over
//! text ids, latent ids, and specials, a SpecNet frame reconstructor, and a
//! convolutional postnet.
//!
//! Sequences are processed one item at a time and unpadded, so the padding
//! mask that a packed-batch layout would need is vacuously all-valid here;
//! batches are plain collections of items and losses average over target
//! positions across the batch.
//!
//! Error policy matches the numerics layer: malformed data (bad ids, frame
//! dimension mismatch, overlong sequences) returns `Err`; calling the tape
//! with shapes that violate an operator contract is a programming error and
//! panics.

pub mod checkpoint;

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{MeldError, Result};
use crate::text::UnifiedVocab;
use crate::vq::Codebook;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Fill value for causally masked attention scores. Large enough that the
/// masked softmax entries underflow to exactly zero.
pub const MASK_FILL: f64 = -1e30;

/// Which statistics the postnet batch norms consume.
///
/// Training always normalizes with the statistics of the current sequence
/// (the time axis plays the role of the batch) and returns running-stat
/// updates. At inference either the accumulated running statistics or the
/// sequence's own statistics may be used; training here is effectively
/// batch-size-1, so per-sequence (instance) statistics are the default and
/// the running-stat path is kept as a switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnUse {
    TrainBatch,
    EvalRunning,
    EvalInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostnetNorm {
    Running,
    Instance,
}

/// Task a sequence is assembled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Tts,
    Stt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    /// Mel frame dimension as seen by the model (n_mels times stack factor).
    pub d_mel_in: usize,
    pub vocab: UnifiedVocab,
    /// Dropout rate inside g_Mel (applied after every GELU).
    pub gmel_dropout: f64,
    pub max_seq_len: usize,
    /// Filter count of the first two postnet convolutions.
    pub postnet_channels: usize,
    /// Statistics used by postnet batch norm at inference.
    pub postnet_norm: PostnetNorm,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, d_model 64, FFN 256, dropout
    /// 0.1. The reference large configuration is 12/16/1024/4096/0.2.
    pub fn desk(d_mel_in: usize, vocab: UnifiedVocab) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ffn: 256,
            dropout: 0.1,
            d_mel_in,
            vocab,
            gmel_dropout: 0.5,
            max_seq_len: 512,
            postnet_channels: 64,
            postnet_norm: PostnetNorm::Instance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_ffn == 0
            || self.d_mel_in == 0
            || self.max_seq_len == 0
            || self.postnet_channels == 0
        {
            return Err(MeldError::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(MeldError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, rate) in [("dropout", self.dropout), ("gmel_dropout", self.gmel_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(MeldError::Config(format!("{name} {rate} not in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One unpadded training or inference sequence.
///
/// The interleaving of Figure-style layouts is implied by the mode rather
/// than stored: TTS runs `[y..., <TTS>, x...]` (frames trail), STT runs
/// `[x..., <STT>, y...]` (frames lead). Targets occupy a contiguous range of
/// positions one step ahead of their inputs; see [`SequenceItem::target_range`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceItem {
    pub mode: Mode,
    pub text_ids: Vec<usize>,
    /// `[n_frames, d_mel]` normalized (and possibly stacked) mel frames.
    pub frames: Array2<f64>,
    /// Corpus utterance id for diagnostics; empty when synthetic.
    pub utt_id: String,
}

impl SequenceItem {
    /// Text ids must come from the text partition of `vocab`; frames must be
    /// finite. Emptiness of either side is allowed here (incremental
    /// inference grows one side from nothing); the corpus-side builders
    /// enforce non-empty training sequences.
    pub fn new(
        mode: Mode,
        text_ids: Vec<usize>,
        frames: Array2<f64>,
        vocab: &UnifiedVocab,
    ) -> Result<Self> {
        for &id in &text_ids {
            if !vocab.is_text(id) {
                return Err(MeldError::Vocab(format!(
                    "sequence text id {id} outside the text partition"
                )));
            }
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(MeldError::InvalidData("non-finite mel frame".into()));
        }
        Ok(Self {
            mode,
            text_ids,
            frames,
            utt_id: String::new(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Total input length including the mode token.
    pub fn seq_len(&self) -> usize {
        self.text_ids.len() + 1 + self.n_frames()
    }

    /// Positions carrying prediction targets. TTS: the `<TTS>` position and
    /// every frame position (T latent targets plus `<EOS>`); STT: the
    /// `<STT>` position and every text position (M text targets plus
    /// `<EOS>`).
    pub fn target_range(&self) -> std::ops::Range<usize> {
        match self.mode {
            Mode::Tts => {
                let start = self.text_ids.len();
                start..start + self.n_frames() + 1
            }
            Mode::Stt => {
                let start = self.n_frames();
                start..start + self.text_ids.len() + 1
            }
        }
    }

    /// Hard target ids for an STT item: the text ids shifted one ahead, then
    /// `<EOS>`.
    pub fn stt_targets(&self, vocab: &UnifiedVocab) -> Vec<usize> {
        let mut t = self.text_ids.clone();
        t.push(vocab.id_eos());
        t
    }
}

/// Per-layer batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Canonical parameter list: `(name, shape)` in initialization draw order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v) = (cfg.d_model, cfg.vocab.total());
    let mut specs: Vec<(String, Vec<usize>)> = vec![("g_text.weight".into(), vec![v, d])];
    let gmel_dims = [(cfg.d_mel_in, d), (d, d), (d, d)];
    for (l, (fi, fo)) in gmel_dims.iter().enumerate() {
        specs.push((format!("g_mel.l{l}.weight"), vec![*fi, *fo]));
        specs.push((format!("g_mel.l{l}.bias"), vec![*fo]));
    }
    for i in 0..cfg.n_layers {
        specs.push((format!("block{i}.ln1.gamma"), vec![d]));
        specs.push((format!("block{i}.ln1.beta"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("block{i}.attn.{w}.weight"), vec![d, d]));
            specs.push((format!("block{i}.attn.{w}.bias"), vec![d]));
        }
        specs.push((format!("block{i}.ln2.gamma"), vec![d]));
        specs.push((format!("block{i}.ln2.beta"), vec![d]));
        specs.push((format!("block{i}.ffn.l0.weight"), vec![d, cfg.d_ffn]));
        specs.push((format!("block{i}.ffn.l0.bias"), vec![cfg.d_ffn]));
        specs.push((format!("block{i}.ffn.l1.weight"), vec![cfg.d_ffn, d]));
        specs.push((format!("block{i}.ffn.l1.bias"), vec![d]));
    }
    specs.push(("ln_f.gamma".into(), vec![d]));
    specs.push(("ln_f.beta".into(), vec![d]));
    specs.push(("head.weight".into(), vec![d, v]));
    specs.push(("head.bias".into(), vec![v]));
    specs.push(("specnet.lin.weight".into(), vec![d, cfg.d_mel_in]));
    specs.push(("specnet.lin.bias".into(), vec![cfg.d_mel_in]));
    let mlp_dims = [(d, d), (d, d), (d, cfg.d_mel_in)];
    for (l, (fi, fo)) in mlp_dims.iter().enumerate() {
        specs.push((format!("specnet.mlp.l{l}.weight"), vec![*fi, *fo]));
        specs.push((format!("specnet.mlp.l{l}.bias"), vec![*fo]));
    }
    let c = cfg.postnet_channels;
    let conv_dims = [(c, cfg.d_mel_in), (c, c), (cfg.d_mel_in, c)];
    for (l, (co, ci)) in conv_dims.iter().enumerate() {
        specs.push((format!("postnet.conv{l}.weight"), vec![*co, *ci, 5]));
        specs.push((format!("postnet.conv{l}.bias"), vec![*co]));
        specs.push((format!("postnet.bn{l}.gamma"), vec![*co]));
        specs.push((format!("postnet.bn{l}.beta"), vec![*co]));
    }
    specs
}

fn postnet_channel_sizes(cfg: &ModelConfig) -> [usize; 3] {
    [cfg.postnet_channels, cfg.postnet_channels, cfg.d_mel_in]
}

/// Sinusoidal position table `[max_len, d]`.
pub fn sinusoidal_pe(max_len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((max_len, d));
    for p in 0..max_len {
        for i in 0..d.div_ceil(2) {
            let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[p, 2 * i]] = (p as f64 * omega).sin();
            if 2 * i + 1 < d {
                pe[[p, 2 * i + 1]] = (p as f64 * omega).cos();
            }
        }
    }
    pe
}

#[derive(Debug, Clone)]
pub struct MeldModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Postnet batch-norm running statistics, one entry per conv layer.
    pub bn_running: Vec<BnStats>,
    pos: Array2<f64>,
}

impl MeldModel {
    /// Fresh model. Weight matrices are Xavier-uniform, the text embedding
    /// rows are uniform with entry variance `1/d_model`, gains are one and
    /// biases zero. Draws are consumed in canonical parameter order, so a
    /// given `(config, seed)` always yields the same parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, "model-init", 0);
        let mut params = ParamStore::new();
        let embed_limit = (3.0 / config.d_model as f64).sqrt();
        for (name, shape) in param_specs(&config) {
            let tensor = if name == "g_text.weight" {
                ArrayD::from_shape_fn(IxDyn(&shape), |_| {
                    rng.random_range(-embed_limit..embed_limit)
                })
            } else if name.ends_with(".gamma") {
                ArrayD::from_elem(IxDyn(&shape), 1.0)
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                ArrayD::zeros(IxDyn(&shape))
            } else {
                let (fan_in, fan_out) = match shape.len() {
                    2 => (shape[0], shape[1]),
                    3 => (shape[1] * shape[2], shape[0] * shape[2]),
                    _ => unreachable!("weight tensors are 2-d or 3-d"),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-limit..limit))
            };
            params.insert(&name, tensor);
        }
        let bn_running = postnet_channel_sizes(&config)
            .iter()
            .map(|&c| BnStats::fresh(c))
            .collect();
        Ok(Self {
            pos: sinusoidal_pe(config.max_seq_len, config.d_model),
            config,
            params,
            bn_running,
        })
    }

    /// Rebuild a model from loaded parts, validating the parameter set
    /// against the canonical list for `config`.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        bn_running: Vec<BnStats>,
    ) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if params.len() != specs.len() {
            return Err(MeldError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape) in &specs {
            match params.get(name) {
                None => {
                    return Err(MeldError::Checkpoint(format!("missing parameter {name}")));
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(MeldError::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Some(_) => {}
            }
        }
        let channels = postnet_channel_sizes(&config);
        if bn_running.len() != channels.len()
            || bn_running
                .iter()
                .zip(channels.iter())
                .any(|(s, &c)| s.mean.len() != c || s.var.len() != c)
        {
            return Err(MeldError::Checkpoint("postnet running stats malformed".into()));
        }
        Ok(Self {
            pos: sinusoidal_pe(config.max_seq_len, config.d_model),
            config,
            params,
            bn_running,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter tensors in canonical `param_specs` order. Gradient checking
    /// pairs this with [`MeldModel::bind_vars`].
    pub fn ordered_params(&self) -> Vec<ArrayD<f64>> {
        param_specs(&self.config)
            .iter()
            .map(|(name, _)| self.params.get(name).expect("canonical param").clone())
            .collect()
    }

    /// Bind externally created leaf variables, given in canonical order.
    /// The variables' values stand in for `self.params`; config, positional
    /// table and running statistics still come from `self`.
    pub fn bind_vars<'m, 't>(&'m self, tape: &'t Tape, leaves: &[Var]) -> BoundModel<'m, 't> {
        let specs = param_specs(&self.config);
        assert_eq!(specs.len(), leaves.len(), "leaf count mismatch");
        let mut vars = BTreeMap::new();
        for ((name, _), var) in specs.iter().zip(leaves.iter()) {
            vars.insert(name.clone(), *var);
        }
        BoundModel {
            model: self,
            tape,
            vars,
        }
    }

    /// Register every parameter on `tape` as a gradient leaf.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape) -> BoundModel<'m, 't> {
        self.bind_with(tape, true)
    }

    /// Register parameters without gradient tracking (inference).
    pub fn bind_frozen<'m, 't>(&'m self, tape: &'t Tape) -> BoundModel<'m, 't> {
        self.bind_with(tape, false)
    }

    fn bind_with<'m, 't>(&'m self, tape: &'t Tape, requires_grad: bool) -> BoundModel<'m, 't> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in self.params.iter() {
            vars.insert(name.clone(), tape.leaf(tensor.clone(), requires_grad));
        }
        BoundModel {
            model: self,
            tape,
            vars,
        }
    }

    /// Fold batch-norm updates returned by a training-mode postnet pass into
    /// the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[Option<(Vec<f64>, Vec<f64>)>]) {
        for (stats, upd) in self.bn_running.iter_mut().zip(updates.iter()) {
            if let Some((mean, var)) = upd {
                stats.mean.clone_from(mean);
                stats.var.clone_from(var);
            }
        }
    }
}

/// Dropout switches for one forward pass. `train` controls the transformer
/// dropouts; `gmel_dropout_active` controls g_Mel's own dropout, which stays
/// on for TTS (training and, by configuration, inference) and is off for STT.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub train: bool,
    pub gmel_dropout_active: bool,
}

impl ForwardOpts {
    pub fn train_tts() -> Self {
        Self {
            train: true,
            gmel_dropout_active: true,
        }
    }

    pub fn train_stt() -> Self {
        Self {
            train: true,
            gmel_dropout_active: false,
        }
    }

    pub fn eval(gmel_dropout_active: bool) -> Self {
        Self {
            train: false,
            gmel_dropout_active,
        }
    }
}

/// Result of a full forward pass. `h` is the pre-head trunk output (it feeds
/// both the vocabulary head and SpecNet), `logits` spans the full unified
/// vocabulary at every position, and `frames` is the leaf holding the input
/// mel frames (useful for causality checks against input positions).
pub struct ForwardPass {
    pub h: Var,
    pub logits: Var,
    pub frames: Var,
}

/// A model whose parameters are registered on a tape.
pub struct BoundModel<'m, 't> {
    pub model: &'m MeldModel,
    pub tape: &'t Tape,
    vars: BTreeMap<String, Var>,
}

impl BoundModel<'_, '_> {
    /// Parameter variable by name; unknown names are a programming error.
    pub fn v(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Shared mel encoder: three Linear-GELU-Dropout layers mapping
    /// `[N, d_mel]` to `[N, d_model]`. Used for both input frames and
    /// codewords.
    pub fn gmel(&self, x: Var, dropout_active: bool, rng: &mut ChaCha8Rng) -> Var {
        let t = self.tape;
        let rate = self.cfg().gmel_dropout;
        let mut h = x;
        for l in 0..3 {
            h = t.linear(h, self.v(&format!("g_mel.l{l}.weight")), self.v(&format!("g_mel.l{l}.bias")));
            h = t.gelu(h);
            h = t.dropout(h, rate, dropout_active, rng);
        }
        h
    }

    /// Embed one sequence: id positions through the `g_text` lookup, frame
    /// positions through g_Mel, content scaled by sqrt(d_model), sinusoidal
    /// positions added. Returns the embedded sequence and the frames leaf.
    pub fn embed_item(
        &self,
        item: &SequenceItem,
        opts: ForwardOpts,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let t = self.tape;
        let cfg = self.cfg();
        if item.n_frames() > 0 && item.frames.ncols() != cfg.d_mel_in {
            return Err(MeldError::ShapeMismatch(format!(
                "frame dim {} does not match d_mel_in {}",
                item.frames.ncols(),
                cfg.d_mel_in
            )));
        }
        for &id in &item.text_ids {
            if !cfg.vocab.is_text(id) {
                return Err(MeldError::Vocab(format!("id {id} is not a text id")));
            }
        }
        let len = item.seq_len();
        if len > cfg.max_seq_len {
            return Err(MeldError::InvalidData(format!(
                "sequence length {len} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let ids: Vec<usize> = match item.mode {
            Mode::Tts => {
                let mut ids = item.text_ids.clone();
                ids.push(cfg.vocab.id_tts());
                ids
            }
            Mode::Stt => {
                let mut ids = vec![cfg.vocab.id_stt()];
                ids.extend_from_slice(&item.text_ids);
                ids
            }
        };
        let id_emb = t.embedding(self.v("g_text.weight"), &ids);
        let frames = t.leaf(item.frames.clone().into_dyn(), true);
        let content = if item.n_frames() == 0 {
            id_emb
        } else {
            let frame_emb = self.gmel(frames, opts.gmel_dropout_active, rng);
            match item.mode {
                Mode::Tts => t.concat(&[id_emb, frame_emb], 0),
                Mode::Stt => t.concat(&[frame_emb, id_emb], 0),
            }
        };
        let scaled = t.scale(content, (cfg.d_model as f64).sqrt());
        let pos = t.constant(self.model.pos.slice(s![..len, ..]).to_owned().into_dyn());
        let mut x = t.add(scaled, pos);
        x = t.dropout(x, cfg.dropout, opts.train, rng);
        Ok((x, frames))
    }

    fn attention(&self, x: Var, i: usize, train: bool, rng: &mut ChaCha8Rng) -> Var {
        let t = self.tape;
        let cfg = self.cfg();
        let (h, d) = (cfg.n_heads, cfg.d_model);
        let dh = d / h;
        let len = t.shape(x)[0];
        let project = |name: &str| {
            let y = t.linear(
                x,
                self.v(&format!("block{i}.attn.{name}.weight")),
                self.v(&format!("block{i}.attn.{name}.bias")),
            );
            // [L, d] -> [H, L, dh]
            t.permute(t.reshape(y, &[len, h, dh]), &[1, 0, 2])
        };
        let q = project("wq");
        let k = project("wk");
        let v = project("wv");
        let scores = t.scale(t.bmm(q, t.permute(k, &[0, 2, 1])), 1.0 / (dh as f64).sqrt());
        let mask = ArrayD::from_shape_fn(IxDyn(&[len, len]), |ix| ix[1] > ix[0]);
        let masked = t.masked_fill(scores, &mask, MASK_FILL);
        let mut probs = t.softmax_last(masked);
        probs = t.dropout(probs, cfg.dropout, train, rng);
        let ctx = t.reshape(t.permute(t.bmm(probs, v), &[1, 0, 2]), &[len, d]);
        let out = t.linear(
            ctx,
            self.v(&format!("block{i}.attn.wo.weight")),
            self.v(&format!("block{i}.attn.wo.bias")),
        );
        t.dropout(out, cfg.dropout, train, rng)
    }

    fn block(&self, x: Var, i: usize, train: bool, rng: &mut ChaCha8Rng) -> Var {
        let t = self.tape;
        let cfg = self.cfg();
        let ln1 = t.layer_norm(
            x,
            self.v(&format!("block{i}.ln1.gamma")),
            self.v(&format!("block{i}.ln1.beta")),
            LN_EPS,
        );
        // Pre-norm residual blocks: x + Attn(LN(x)), then x + FFN(LN(x)).
        let x = t.add(x, self.attention(ln1, i, train, rng));
        let ln2 = t.layer_norm(
            x,
            self.v(&format!("block{i}.ln2.gamma")),
            self.v(&format!("block{i}.ln2.beta")),
            LN_EPS,
        );
        let mut f = t.linear(
            ln2,
            self.v(&format!("block{i}.ffn.l0.weight")),
            self.v(&format!("block{i}.ffn.l0.bias")),
        );
        f = t.gelu(f);
        f = t.linear(
            f,
            self.v(&format!("block{i}.ffn.l1.weight")),
            self.v(&format!("block{i}.ffn.l1.bias")),
        );
        f = t.dropout(f, cfg.dropout, train, rng);
        t.add(x, f)
    }

    /// Full pass: embed, causal transformer trunk, final norm, head.
    pub fn forward(
        &self,
        item: &SequenceItem,
        opts: ForwardOpts,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let t = self.tape;
        let (mut x, frames) = self.embed_item(item, opts, rng)?;
        for i in 0..self.cfg().n_layers {
            x = self.block(x, i, opts.train, rng);
        }
        let h = t.layer_norm(x, self.v("ln_f.gamma"), self.v("ln_f.beta"), LN_EPS);
        let logits = t.linear(h, self.v("head.weight"), self.v("head.bias"));
        Ok(ForwardPass { h, logits, frames })
    }

    /// SpecNet reconstruction for a batch of positions: given trunk outputs
    /// `h` (`[N, d_model]`) and sampled latent indices `z` (`0..K`), compute
    /// `u = h + g_Mel(c_z)` and `x_hat = Linear(u) + MLP(u)`.
    ///
    /// `ablate_zero_codeword` replaces `c_z` with the zero vector (the
    /// "without z_t" ablation pathway).
    pub fn specnet(
        &self,
        h: Var,
        z: &[usize],
        cb: &Codebook,
        ablate_zero_codeword: bool,
        gmel_dropout_active: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let t = self.tape;
        let cfg = self.cfg();
        assert_eq!(t.shape(h)[0], z.len(), "specnet position count");
        if cb.dim() != cfg.d_mel_in {
            return Err(MeldError::ShapeMismatch(format!(
                "codebook dim {} does not match d_mel_in {}",
                cb.dim(),
                cfg.d_mel_in
            )));
        }
        let mut cz = Array2::zeros((z.len(), cfg.d_mel_in));
        for (n, &k) in z.iter().enumerate() {
            if k >= cb.k() {
                return Err(MeldError::Vocab(format!(
                    "latent index {k} out of range for codebook of size {}",
                    cb.k()
                )));
            }
            if !ablate_zero_codeword {
                cz.row_mut(n).assign(&cb.codeword(k));
            }
        }
        let cz_emb = self.gmel(t.constant(cz.into_dyn()), gmel_dropout_active, rng);
        let u = t.add(h, cz_emb);
        let lin = t.linear(u, self.v("specnet.lin.weight"), self.v("specnet.lin.bias"));
        let mut m = u;
        for l in 0..3 {
            m = t.linear(
                m,
                self.v(&format!("specnet.mlp.l{l}.weight")),
                self.v(&format!("specnet.mlp.l{l}.bias")),
            );
            if l < 2 {
                m = t.gelu(m);
            }
        }
        Ok(t.add(lin, m))
    }

    /// Convolutional postnet residual `conv(x_hat)`: three width-5 convs,
    /// batch norm after each, tanh after all but the last. Returns the
    /// residual (callers add it to `x_hat`) plus running-stat updates when
    /// `bn` is [`BnUse::TrainBatch`].
    pub fn postnet(&self, xhat: Var, bn: BnUse) -> (Var, Vec<Option<(Vec<f64>, Vec<f64>)>>) {
        let t = self.tape;
        let mut x = xhat;
        let mut updates = Vec::with_capacity(3);
        for l in 0..3 {
            x = t.conv1d(
                x,
                self.v(&format!("postnet.conv{l}.weight")),
                self.v(&format!("postnet.conv{l}.bias")),
            );
            let stats = &self.model.bn_running[l];
            let batch_stats = matches!(bn, BnUse::TrainBatch | BnUse::EvalInstance);
            let (y, upd) = t.batch_norm_1d(
                x,
                self.v(&format!("postnet.bn{l}.gamma")),
                self.v(&format!("postnet.bn{l}.beta")),
                &stats.mean,
                &stats.var,
                BN_MOMENTUM,
                BN_EPS,
                batch_stats,
            );
            x = y;
            updates.push(if bn == BnUse::TrainBatch { upd } else { None });
            if l < 2 {
                x = t.tanh(x);
            }
        }
        (x, updates)
    }

    /// Gradients for every parameter after `tape.backward`; parameters that
    /// did not participate in the loss get exact zeros.
    pub fn collect_grads(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut grads = BTreeMap::new();
        for (name, tensor) in self.model.params.iter() {
            let g = self
                .tape
                .grad(self.vars[name])
                .unwrap_or_else(|| ArrayD::zeros(tensor.raw_dim()));
            grads.insert(name.clone(), g);
        }
        grads
    }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::make_unified_vocab;
    use crate::vq::kmeans_fit;
    use ndarray::Array2;

    const D_MEL: usize = 8;

    fn small_config() -> ModelConfig {
        let vocab = make_unified_vocab(11, 6).unwrap();
        let mut cfg = ModelConfig::desk(D_MEL, vocab);
        cfg.d_model = 16;
        cfg.d_ffn = 32;
        cfg.n_heads = 2;
        cfg.max_seq_len = 64;
        cfg.postnet_channels = 6;
        cfg
    }

    fn test_rng(tag: &str) -> ChaCha8Rng {
        crate::rng::stream(7, tag, 0)
    }

    fn random_frames(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, D_MEL), |_| rng.random_range(-1.0..1.0))
    }

    fn tts_item(cfg: &ModelConfig, n_text: usize, n_frames: usize) -> SequenceItem {
        let mut rng = test_rng("item");
        let ids = (0..n_text).map(|i| i % cfg.vocab.v_text).collect();
        SequenceItem::new(Mode::Tts, ids, random_frames(n_frames, &mut rng), &cfg.vocab).unwrap()
    }

    #[test]
    fn desk_defaults() {
        let cfg = ModelConfig::desk(80, make_unified_vocab(256, 32).unwrap());
        assert_eq!(
            (cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ffn),
            (2, 4, 64, 256)
        );
        assert_eq!(cfg.dropout, 0.1);
        assert_eq!(cfg.gmel_dropout, 0.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn head_divisibility_enforced() {
        let mut cfg = small_config();
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = small_config();
        let a = MeldModel::init(cfg.clone(), 3).unwrap();
        let b = MeldModel::init(cfg.clone(), 3).unwrap();
        assert_eq!(a.params, b.params);
        let c = MeldModel::init(cfg, 4).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn sequence_layout_arithmetic() {
        // M=2 text tokens, T=3 frames: input length 6, four target positions.
        let cfg = small_config();
        let item = tts_item(&cfg, 2, 3);
        assert_eq!(item.seq_len(), 6);
        assert_eq!(item.target_range(), 2..6);
        let mut rng = test_rng("stt-item");
        let stt = SequenceItem::new(
            Mode::Stt,
            vec![0, 1],
            random_frames(3, &mut rng),
            &cfg.vocab,
        )
        .unwrap();
        assert_eq!(stt.seq_len(), 6);
        assert_eq!(stt.target_range(), 3..6);
        assert_eq!(stt.stt_targets(&cfg.vocab), vec![0, 1, cfg.vocab.id_eos()]);
    }

    #[test]
    fn non_text_input_id_rejected() {
        let cfg = small_config();
        let lat = cfg.vocab.latent_id(0);
        let err = SequenceItem::new(Mode::Tts, vec![lat], Array2::zeros((1, D_MEL)), &cfg.vocab);
        assert!(err.is_err());
    }

    #[test]
    fn identical_frames_differ_only_by_position() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 1).unwrap();
        let mut frames = Array2::zeros((3, D_MEL));
        for mut row in frames.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = 0.3 * j as f64 - 0.5;
            }
        }
        let item = SequenceItem::new(Mode::Tts, vec![1, 2], frames, &cfg.vocab).unwrap();
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = test_rng("embed");
        let (emb, _) = bound.embed_item(&item, ForwardOpts::eval(false), &mut rng).unwrap();
        let e = tape.value(emb);
        // Frame positions are 3 and 4 (after [y, y, <TTS>]); content is equal
        // so the embedding difference must equal the position-table difference.
        for j in 0..cfg.d_model {
            let got = e[[3, j]] - e[[4, j]];
            let want = model.pos[[3, j]] - model.pos[[4, j]];
            assert!((got - want).abs() < 1e-9, "dim {j}: {got} vs {want}");
        }
    }

    #[test]
    fn logit_rows_match_sequence_length() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 2).unwrap();
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = test_rng("fw");
        for (n_text, n_frames) in [(1, 0), (2, 3), (4, 7)] {
            let item = tts_item(&cfg, n_text, n_frames);
            let out = bound.forward(&item, ForwardOpts::eval(false), &mut rng).unwrap();
            assert_eq!(tape.shape(out.logits), vec![item.seq_len(), cfg.vocab.total()]);
            assert_eq!(tape.shape(out.h), vec![item.seq_len(), cfg.d_model]);
        }
    }

    #[test]
    fn logits_finite_and_softmax_normalized() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 5).unwrap();
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = test_rng("sanity");
        let item = tts_item(&cfg, 3, 5);
        let out = bound.forward(&item, ForwardOpts::eval(false), &mut rng).unwrap();
        let logits = tape.value(out.logits);
        assert!(logits.iter().all(|v| v.is_finite()));
        let probs = tape.value(tape.softmax_last(out.logits));
        for row in probs.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
        }
    }

    #[test]
    fn future_frame_perturbation_leaves_past_logits_unchanged() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 6).unwrap();
        let item = tts_item(&cfg, 2, 4);
        let mut perturbed = item.clone();
        perturbed.frames[[3, 2]] += 1.0;
        let run = |it: &SequenceItem| {
            let tape = Tape::new();
            let bound = model.bind_frozen(&tape);
            let mut rng = test_rng("causal");
            let out = bound.forward(it, ForwardOpts::eval(false), &mut rng).unwrap();
            tape.value(out.logits)
        };
        let a = run(&item);
        let b = run(&perturbed);
        // The last frame sits at position 6; logits at positions <= 5 must
        // be bitwise identical.
        for p in 0..6 {
            for v in 0..cfg.vocab.total() {
                assert_eq!(a[[p, v]], b[[p, v]], "position {p}");
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn causality_gradients_exactly_zero() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 8).unwrap();
        let item = tts_item(&cfg, 2, 4);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let mut rng = test_rng("causal-grad");
        let out = bound.forward(&item, ForwardOpts::eval(false), &mut rng).unwrap();
        // Sum the logits at position 3 (= frame index 0) and differentiate.
        let row = tape.slice(out.logits, 0, 3, 4);
        let loss = tape.sum_all(row);
        tape.backward(loss).unwrap();
        let g = tape.grad(out.frames).expect("frame grads");
        // Frame 0 feeds position 3 itself; frames 1.. are strictly future.
        assert!(g.slice(s![0, ..]).iter().any(|v| *v != 0.0));
        for f in 1..4 {
            for j in 0..D_MEL {
                assert_eq!(g[[f, j]], 0.0, "frame {f} dim {j}");
            }
        }
    }

    #[test]
    fn overlong_sequence_rejected() {
        let mut cfg = small_config();
        cfg.max_seq_len = 8;
        let model = MeldModel::init(cfg.clone(), 2).unwrap();
        let item = tts_item(&cfg, 3, 10);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = test_rng("overlong");
        assert!(bound.forward(&item, ForwardOpts::eval(false), &mut rng).is_err());
    }

    fn small_codebook(cfg: &ModelConfig) -> Codebook {
        let mut rng = test_rng("cb");
        let data = Array2::from_shape_fn((40, cfg.d_mel_in), |_| rng.random_range(-1.0..1.0));
        kmeans_fit(data.view(), 4, 50, 9).unwrap()
    }

    #[test]
    fn specnet_zero_weights_yield_bias() {
        let cfg = small_config();
        let mut model = MeldModel::init(cfg.clone(), 3).unwrap();
        for l in 0..3 {
            model
                .params
                .get_mut(&format!("specnet.mlp.l{l}.weight"))
                .unwrap()
                .fill(0.0);
            model
                .params
                .get_mut(&format!("specnet.mlp.l{l}.bias"))
                .unwrap()
                .fill(0.0);
        }
        model.params.get_mut("specnet.lin.weight").unwrap().fill(0.0);
        model.params.get_mut("specnet.lin.bias").unwrap().fill(0.25);
        let cb = small_codebook(&cfg);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = test_rng("specnet");
        let h = tape.constant(ArrayD::from_elem(IxDyn(&[2, cfg.d_model]), 0.7));
        let xhat = bound.specnet(h, &[0, 1], &cb, false, false, &mut rng).unwrap();
        let v = tape.value(xhat);
        assert!(v.iter().all(|x| (*x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn specnet_latent_flows_into_output() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 4).unwrap();
        let cb = small_codebook(&cfg);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = test_rng("z-flow");
        let h = tape.constant(ArrayD::from_elem(IxDyn(&[1, cfg.d_model]), 0.1));
        let a = tape.value(bound.specnet(h, &[0], &cb, false, false, &mut rng).unwrap());
        let b = tape.value(bound.specnet(h, &[1], &cb, false, false, &mut rng).unwrap());
        assert_ne!(a, b);
    }

    #[test]
    fn specnet_zero_codeword_ablation_changes_output() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 4).unwrap();
        let cb = small_codebook(&cfg);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = test_rng("ablate");
        let h = tape.constant(ArrayD::from_elem(IxDyn(&[1, cfg.d_model]), -0.2));
        let normal = tape.value(bound.specnet(h, &[2], &cb, false, false, &mut rng).unwrap());
        let ablated = tape.value(bound.specnet(h, &[2], &cb, true, false, &mut rng).unwrap());
        assert_ne!(normal, ablated);
    }

    #[test]
    fn specnet_rejects_out_of_range_latent() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 4).unwrap();
        let cb = small_codebook(&cfg);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = test_rng("oob");
        let h = tape.constant(ArrayD::zeros(IxDyn(&[1, cfg.d_model])));
        assert!(bound.specnet(h, &[cb.k()], &cb, false, false, &mut rng).is_err());
    }

    #[test]
    fn postnet_zero_input_zero_biases_zero_output() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 5).unwrap();
        // Init already makes biases and betas zero.
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let xhat = tape.constant(ArrayD::zeros(IxDyn(&[7, cfg.d_mel_in])));
        for bn in [BnUse::TrainBatch, BnUse::EvalRunning, BnUse::EvalInstance] {
            let (res, _) = bound.postnet(xhat, bn);
            assert!(tape.value(res).iter().all(|v| *v == 0.0), "{bn:?}");
        }
    }

    #[test]
    fn postnet_receptive_field_is_thirteen_frames() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 6).unwrap();
        let mut rng = test_rng("rf");
        let x = Array2::from_shape_fn((30, cfg.d_mel_in), |_| rng.random_range(-1.0..1.0));
        let mut y = x.clone();
        y[[15, 3]] += 1.0;
        let run = |input: &Array2<f64>| {
            let tape = Tape::new();
            let bound = model.bind_frozen(&tape);
            let v = tape.constant(input.clone().into_dyn());
            // Running statistics keep normalization pointwise so the change
            // cannot leak through batch statistics.
            let (res, _) = bound.postnet(v, BnUse::EvalRunning);
            tape.value(res)
        };
        let a = run(&x);
        let b = run(&y);
        let mut changed = Vec::new();
        for t in 0..30 {
            if (0..cfg.d_mel_in).any(|j| a[[t, j]] != b[[t, j]]) {
                changed.push(t);
            }
        }
        assert!(!changed.is_empty());
        for &t in &changed {
            assert!(
                (9..=21).contains(&t),
                "frame {t} outside the 13-frame receptive field"
            );
        }
    }

    #[test]
    fn postnet_handles_single_frame() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 7).unwrap();
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, cfg.d_mel_in]), 0.4));
        for bn in [BnUse::TrainBatch, BnUse::EvalRunning, BnUse::EvalInstance] {
            let (res, _) = bound.postnet(x, bn);
            assert_eq!(tape.shape(res), vec![1, cfg.d_mel_in]);
            assert!(tape.value(res).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn bn_updates_move_running_stats() {
        let cfg = small_config();
        let mut model = MeldModel::init(cfg.clone(), 8).unwrap();
        let before = model.bn_running.clone();
        let mut rng = test_rng("bn");
        let input = Array2::from_shape_fn((12, cfg.d_mel_in), |_| rng.random_range(-1.0..1.0));
        let updates = {
            let tape = Tape::new();
            let bound = model.bind_frozen(&tape);
            let x = tape.constant(input.into_dyn());
            let (_, updates) = bound.postnet(x, BnUse::TrainBatch);
            updates
        };
        assert!(updates.iter().all(|u| u.is_some()));
        model.apply_bn_updates(&updates);
        assert_ne!(model.bn_running, before);
    }

    #[test]
    fn stt_grads_never_touch_specnet_or_postnet() {
        let cfg = small_config();
        let model = MeldModel::init(cfg.clone(), 9).unwrap();
        let mut rng = test_rng("stt-iso");
        let item = SequenceItem::new(
            Mode::Stt,
            vec![0, 3, 5],
            random_frames(4, &mut rng),
            &cfg.vocab,
        )
        .unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let out = bound.forward(&item, ForwardOpts::train_stt(), &mut rng).unwrap();
        let loss = tape.mean_all(out.logits);
        tape.backward(loss).unwrap();
        let grads = bound.collect_grads();
        for (name, g) in &grads {
            if name.starts_with("specnet.") || name.starts_with("postnet.") {
                assert!(g.iter().all(|v| *v == 0.0), "{name} grads not zero");
            }
        }
        assert!(grads["head.weight"].iter().any(|v| *v != 0.0));
    }
}
