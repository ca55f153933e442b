//! Hard-negative aware contrastive training for text-video retrieval.
//!
//! The pipeline: a [`corpus::Corpus`] of raw caption/video embeddings is
//! projected by the stub encoders in [`encoder`], scored with the
//! attention-enhanced similarity of [`dmae`], and trained with the
//! negative-aware contrastive loss of [`negnce`] plus the partial-margin
//! triplet loss of [`tpmcl`]. [`trainer`] runs the optimisation and
//! [`evalkit`] computes retrieval metrics.

pub mod bundle;
pub mod config;
pub mod corpus;
pub mod dmae;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod negnce;
pub mod tpmcl;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
