//! Instrumented desk-scale decoder-only transformer for studying how a
//! model routes internal (parametric) and external (retrieved) knowledge
//! in retrieval-augmented prompts.
//!
//! Layers, bottom up:
//!
//! - [`autograd`]: dense tensors and reverse-mode differentiation.
//! - [`model`]: pre-norm GLU transformer with trace capture, attention
//!   masks, neuron deactivation and logit-lens decoding.
//! - [`tokenizer`] and [`spans`]: word-level tokenizer and RAG prompt
//!   assembly with context/key/query/answer spans.
//! - [`flow`]: attention and saliency information flow, layer stages.
//! - [`intervene`]: key-to-query attention cuts and deactivation runs.
//! - [`kape`]: activation-probability entropy and knowledge-neuron selection.
//! - [`corpus`]: synthetic fact world, QA tiers, training, EM/CEM/F1.
//! - [`report`]: versioned CSV/JSON emission.

pub mod analysis;
pub mod autograd;
pub mod corpus;
pub mod error;
pub mod flow;
pub mod intervene;
pub mod kape;
pub mod model;
pub mod report;
pub mod spans;
pub mod tokenizer;

pub use error::{Error, Result};
