//! Evidence-weighted explanation generation: a dual-encoder transformer whose
//! decoder mixes per-paragraph evidence features with latent weights fitted
//! by expectation-maximization.

pub mod backbone;
pub mod corpus;
pub mod costmodel;
pub mod decoding;
pub mod em;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod retrieval;
pub mod seeds;

pub use error::{Error, Result};
