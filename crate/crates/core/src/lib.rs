//! Attention-based neural machine translation with reference networks.
//!
//! The baseline is a bidirectional recurrent encoder with an attentive
//! recurrent decoder. Two extensions feed global context into the decoder
//! state update:
//!
//! * the monolingual reference network ([`mref`]) attends over anchor points
//!   fitted to mean-pooled encoder states by local coordinate coding ([`lcc`]);
//! * the bilingual reference network ([`bref`]) regresses the next target
//!   embedding with anchor-local affine maps.
//!
//! Training is stage-wise ([`training`]) with group-level parameter freezing,
//! and [`eval`] provides corpus BLEU, length buckets and parameter counts.

pub mod autodiff;
pub mod bref;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod lcc;
pub mod model;
pub mod mref;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
