//! Desk-scale vision-language data engine.
//!
//! The crate trains a small region-conditioned vision-language model that writes
//! dense captions and question/answer pairs for image regions, a second model that
//! validates the answers, and a pipeline that turns the two into a filtered
//! synthetic dataset plus a multi-task pre-training harness. Everything runs on a
//! CPU in seconds-to-minutes over a procedurally generated micro-world of colored
//! shapes, with bit-reproducible results for a fixed seed.
//!
//! Module map:
//!
//! - [`tensor`] — dense `f64` tensors with reverse-mode autodiff, an AdamW-style
//!   optimizer, checkpoint serialization, and a finite-difference checking utility.
//! - [`vocab`] — word-level vocabulary, special/location/question-type tokens,
//!   prompt grammars, box quantization, and masking policies.
//! - [`model`] — the toy vision-language transformer: patch embedding, target-region
//!   feature injection, a text stack with causal/bidirectional modes and
//!   cross-attention, plus global embedding heads.
//! - [`objectives`] — masked-language-model losses for caption/question/answer
//!   spans and the contrastive/matching/captioning pre-training objectives.
//! - [`generator`] — top-K and greedy decoding, including the two-stage
//!   question-then-answer sampler and its batched form.
//! - [`filter`] — the answer-consistency filter: beam-search answer prediction and
//!   exact-match retention.
//! - [`pipeline`] — micro-world synthesis, dataset records, generation/filter jobs,
//!   statistics, the pre-training loops, run configuration, and the CLI surface.
//!
//! The primary interface is the `examples/` directory (one runnable program per
//! capability); the `vlmforge` binary exposes the same capabilities as subcommands
//! for scripted runs.

pub mod filter;
pub mod generator;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vocab;
