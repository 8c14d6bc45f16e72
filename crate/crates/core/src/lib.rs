//! Training and evaluation toolkit for EEG-based zero-shot visual decoding.
//!
//! The pipeline: a subject-aware spectro-temporal EEG encoder maps raw trials
//! onto the unit hypersphere, a semantic enhancement stage builds text
//! prototypes and perturbs EEG embeddings for robustness, a text-anchored
//! alignment stage fuses cross-modal context into the embeddings, and a
//! two-term InfoNCE objective trains the whole stack. Evaluation is N-way
//! zero-shot retrieval against image embeddings of classes never seen in
//! training.
//!
//! Everything is deterministic under a single seed: data synthesis, batching,
//! parameter init, dropout, perturbation draws, and evaluation distractor
//! sampling all derive their streams from labeled sub-seeds.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eitra;
pub mod error;
pub mod eval;
pub mod fft;
pub mod gradcheck;
pub mod nesta;
pub mod objective;
pub mod optim;
pub mod plot;
pub mod semantic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
