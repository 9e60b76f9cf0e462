//! Two-stage multimodal chain-of-thought reasoning at desk scale.
//!
//! A small encoder-decoder transformer whose encoder states are fused with
//! precomputed image patch features through single-head attention and a
//! sigmoid gate, trained first to generate rationales and then to infer
//! answers from question, context, options, and rationale.

pub mod cli;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod pipeline;
pub mod tensor;
