//! Context-aware text style transfer: data model, vocabulary, the dual-encoder
//! transfer network, frozen regularizers, training objectives, the training
//! loop and the evaluation harness.

pub mod batch;
pub mod checkpoint;
pub mod classifiers;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod training;
pub mod vocab;

pub use error::{CastError, Result};
