//! Audio-visual deepfake detection from identity and audio-visual
//! consistency.
//!
//! Two contrastively trained models turn a face video into window
//! embeddings. A real video keeps a stable identity across windows and keeps
//! its visual and audio embeddings aligned in time; a manipulated one tends
//! to break one or both. Scores are similarities, so higher means more
//! likely real.

// negated comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregator;
pub mod cli;
pub mod config;
pub mod consistency;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod scorer;
pub mod streams;
pub mod synthgen;
pub mod trainer;

pub(crate) mod seeding;

pub use error::{Error, Result};
