//! Contrastive (CLIP), non-contrastive (nCLIP) and combined (xCLIP)
//! language-image objectives at desk scale.
//!
//! Every loss returns its value together with analytic gradients with
//! respect to the raw logits / pre-normalization features and the log
//! temperature. The rest of the crate is the machinery needed to exercise
//! those losses end to end: a small dual encoder with manual backward
//! passes, an AdamW training loop with collapse diagnostics, a synthetic
//! paired-data generator, and zero-shot / retrieval / linear-probe
//! evaluation.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod matrix;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use numerics::ProbMatrix;
