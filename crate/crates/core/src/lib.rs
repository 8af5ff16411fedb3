//! Episodic encoder/decoder training with a denoised, divergence-ordered
//! curriculum for low-resource NMT domain adaptation, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a recorded computation graph with a reverse
//!   pass, parameter sets, SGD, and checkpoints.
//! * [`model`]: a small encoder-decoder transformer with swappable halves,
//!   greedy/beam decoding, and a decoder-only language model.
//! * [`corpus`]: synthetic multi-domain parallel corpora, noise injection,
//!   length filtering, splits, and TSV I/O.
//! * [`curriculum`]: denoise and divergence scoring, shard plans, and the
//!   three-stage sampling schedulers.
//! * [`trainers`]: Vanilla, AGG, curriculum AGG, first-order MAML, and the
//!   episodic trainers, plus per-domain fine-tuning.
//! * [`eval`]: corpus BLEU and the experiment reports.
//! * [`config`] and [`pipeline`]: the JSON run configuration and the
//!   command implementations behind the `epi` binary.

pub mod config;
pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
