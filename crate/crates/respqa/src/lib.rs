//! Two-stage routed multimodal question answering over synthetic
//! respiratory-style audio.
//!
//! The pipeline hard-selects one frozen audio-encoder expert per example
//! (audio mixture-of-experts) and one LoRA adapter on a shared frozen
//! causal language model (language mixture-of-adapters), trained end to
//! end with straight-through Gumbel-Softmax routing plus load-balancing
//! and entropy regularization. Everything runs on a small self-contained
//! f64 autodiff engine; no external model weights or audio files.
//!
//! Crate map:
//! - [`tensor`]: dense tensors, tape-based reverse-mode autodiff, gradcheck
//! - [`nn`]: audio-encoder experts, aligners, frozen causal LM, LoRA banks
//! - [`routing`]: router policies, straight-through Gumbel-Softmax, balance
//!   and entropy regularizers, balanced warmup
//! - [`model`]: end-to-end forward/loss/generation and training loop
//! - [`synthdata`]: deterministic synthetic QA corpus generator
//! - [`evalkit`]: answer parsing, metrics, routing reports
//! - [`cli`]: config-driven commands behind the `respqa` binary

pub mod cli;
pub mod evalkit;
pub mod model;
pub mod nn;
pub mod rng;
pub mod routing;
pub mod synthdata;
pub mod tensor;
