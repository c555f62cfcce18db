//! Cross-modal motion-text retrieval at desk scale: dual sequence
//! encoders into a shared unit sphere, triplet losses with hard-negative
//! mining and false-negative pruning, a synthetic atomic-action corpus
//! generator, a deterministic training loop, and the retrieval
//! evaluation protocol (R@K, median rank, R-sum).

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod loss;
pub mod numeric;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
