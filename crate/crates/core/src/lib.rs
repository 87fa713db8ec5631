//! Transformer re-ranking with precomputed document term representations.
//!
//! The first `l` encoder layers keep the query and the document apart, so a
//! document's layer-`l` representations can be computed at index time,
//! compressed and stored. At query time only the query goes through those
//! layers; the remaining `n − l` layers run over the joined sequence.

pub mod bench;
pub mod compression;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod split;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
