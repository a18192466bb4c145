//! Core library for the demorecon instruction-augmentation pipeline.
//!
//! The pipeline decomposes seed instructions into background facts and
//! sub-instructions, modifies exactly one sub-instruction per variant,
//! reconstructs instruction variants, collects chat-model responses in
//! two modes (direct and reference-guided), and assembles preference
//! pairs plus fine-grained evaluation and detection sets. A dispersion
//! metric over response embeddings and an LLM-as-judge harness round
//! out the toolkit.
//!
//! Everything is deterministic given (seeds, replay fixture, config,
//! rng seed): stage outputs are content-addressed, sorted before
//! writing, and byte-identical across reruns.

pub mod config;
pub mod eval;
pub mod manifest;
pub mod metrics;
pub mod parsers;
pub mod pipeline;
pub mod provider;
pub mod records;
pub mod rngutil;
pub mod runner;
pub mod scripted;
pub mod templates;

pub use records::{
    content_id, DetItem, EvalItem, InstructionId, Judgement, PreferencePair, ResponseMode,
    ResponseRecord, SeedId, SeedInstruction, TokenUsage, VariantInstruction,
};
