//! Latent-query abstractive summarization at desk scale.
//!
//! A jointly trained latent query model and conditional language model:
//! subword-level LCS alignment supplies weak supervision for the latent
//! query posterior, a dual-view transformer decoder consumes a
//! query-focused and a query-agnostic encoding of the document, and
//! observed queries calibrate the posterior at inference without any
//! retraining.

pub mod bpe;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod latent;
pub mod lcs;
pub mod mds;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod rouge;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
