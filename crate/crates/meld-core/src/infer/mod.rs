//! Decoding: sampling controls, TTS continuation, and STT beam search.

pub mod generate;
pub mod sampling;

pub use generate::{duration_report, generate_tts, transcribe_beam, DurationReport, Transcription};
pub use sampling::{
    apply_repetition_penalty, filter_top_k_top_p, sample_index, FilteredDistribution,
    GenerationConfig, GenerationTrace, StepSummary, Termination, TraceStep,
};
