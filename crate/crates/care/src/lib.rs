//! Conflict-aware retrieval-augmented generation at desk scale.
//!
//! A frozen toy decoder-only transformer serves as the base model. A
//! LoRA-adapted copy of it (the *context assessor*) compresses retrieved
//! context into K memory embeddings that are injected into the frozen
//! model's prompt as a soft background slot. Training runs in two stages:
//! reconstruction pre-training of the assessor, then conflict-aware
//! fine-tuning on grounded/adversarial examples with a language-modeling
//! loss plus a scenario-dependent distillation loss. The evaluation
//! harness scores closed-book, concatenation RAG, and the soft-prompt
//! method with Span EM and the Resilience/Boost decomposition over a
//! synthetic fact world with controllable context-memory conflicts.

pub mod assessor;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
