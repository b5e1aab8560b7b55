//! Few-shot domain-adversarial training (DANN / multi-target MDANN) on a
//! small convolutional backbone, with the data pipeline, training loop and
//! explainability tooling around it.

// Validation uses `!(x >= 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod training;
pub mod seed;

pub use autodiff::{Init, NodeId, ReversalScale, Tape, Tensor};
pub use error::{Error, Result};
pub use model::{BackboneConfig, ModelParams, ParamGroup};
