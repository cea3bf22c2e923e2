//! Locality-enhanced contextual biasing for sequence recognition.
//!
//! The crate covers the whole pipeline at desk scale: subword tokenization,
//! phrase pools and the four phrase-sampling strategies, a bidirectional
//! context encoder with key/value left shift, multi-head bias retrieval,
//! neighbourhood-attention refinement and its combiners, SVCCA analysis of
//! bias embeddings, and a synthetic recognition harness that trains and
//! evaluates the biasing module against a frozen backbone.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod pools;
pub mod sampling;
pub mod tokenizer;
pub mod encoder;
pub mod biasing;
pub mod plot;
pub mod svcca;
pub mod harness;
