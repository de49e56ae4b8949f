//! Edge-set attention over graphs.
//!
//! Graphs are turned into sets of edge (or node) tokens, processed by an
//! encoder of masked and unmasked self-attention blocks, and pooled into a
//! graph-level vector by attention over learned seed vectors.

pub mod analysis;
pub mod error;
pub mod graph;
pub mod masking;
pub mod model;
pub mod selfcheck;
pub mod tensor;
pub mod training;

pub use error::{EsaError, Result};
