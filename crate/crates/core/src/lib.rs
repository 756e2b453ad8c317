//! Adaptive speech-recognition runtime built around per-characteristic
//! low-rank adapter profiles.
//!
//! The crate ships a small frozen transformer transcription model, LoRA
//! profile libraries keyed by speaker-characteristic taxonomies, a
//! characteristic classifier, concatenation-based adapter merging, and the
//! evaluation stack (word error rate, fairness metrics, latency benchmarks)
//! needed to study the whole system end to end on synthetic data.

pub mod asr;
pub mod classifier;
pub mod error;
pub mod features;
pub mod library;
pub mod lora;
pub mod taxonomy;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{PiwError, Result};

#[cfg(test)]
mod scratch {
    include!("/tmp/scratch_test.rs");
}
