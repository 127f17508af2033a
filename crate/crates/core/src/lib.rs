//! Decoupled non-autoregressive error correction: a permutation oracle,
//! pointer-based permutation search and a step-unrolled infilling decoder.

pub mod align;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod neural;
pub mod pipeline;
pub mod refine;
pub mod search;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod types;

pub use error::{Error, Result};
