//! Synthetic corpus generation, sequence assembly, SpecAugment, and
//! batching.

mod augment;
mod batch;
mod sequence;
mod synth;

pub use augment::{spec_augment, SpecAugmentConfig, MASK_FILL};
pub use batch::{make_batches, Batch, EncodedUtterance, ModeMix};
pub use sequence::{
    build_stt_sequence, build_tts_sequence, prompt_len, MIN_PROMPT_FRAMES,
};
pub use synth::{
    generate_corpus, load_entry_wave, read_manifest, synthesize_utterance, write_corpus,
    ManifestEntry, SynthSpec, Utterance, MAX_TONE_HZ, SYNTH_SAMPLE_RATE_HZ, TONE_STEP_HZ,
};
