//! Chunkwise streaming voice-conversion inference runtime.
//!
//! The library converts a source voice to a reference speaker's voice one
//! chunk at a time: a chunk-incremental attention encoder turns audio into
//! discrete content labels, a reference pre-pass extracts a global timbre
//! embedding plus vector-quantized style tokens, a causal decoder predicts
//! pitch and mel frames, and a fully causal pixel-shuffle vocoder emits
//! waveform samples. Every stage carries explicit state so that chunked
//! execution is bit-exact against single-shot execution, and per-stage
//! latency is accounted for in real-time-factor reports.

pub mod dsp;
pub mod decoder;
pub mod extractor;
pub mod model;
pub mod pipeline;
pub mod style;
pub mod verify;
pub mod vocoder;
pub mod tensor;

pub use dsp::{MelConfig, MelStream, PcmAudio};
pub use model::{ModelConfig, ModelIoError, ModelWeights, Setting};
pub use pipeline::{
    convert_pipelined, convert_sliding, overall_latency, receptive_field, LatencyReport, Model,
    PipelineError, ReferenceContext, StreamSession,
};
pub use tensor::{Tensor2D, TensorError};

// mdbook can't execute Rust blocks itself, so the guide's chapters are
// mounted here as doc comments and `cargo test --doc` runs every fenced
// sample. One module per chapter keeps failures attributable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/carried-state.md")]
    mod carried_state {}
    #[doc = include_str!("../../../book/src/content-extraction.md")]
    mod content_extraction {}
    #[doc = include_str!("../../../book/src/style-quantization.md")]
    mod style_quantization {}
    #[doc = include_str!("../../../book/src/decoding-vocoding.md")]
    mod decoding_vocoding {}
    #[doc = include_str!("../../../book/src/streaming-sessions.md")]
    mod streaming_sessions {}
    #[doc = include_str!("../../../book/src/latency-accounting.md")]
    mod latency_accounting {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
