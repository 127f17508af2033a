//! Small transformer scorer: shared encoder, pointer head and infilling
//! decoder, with hand-written reverse-mode gradients.

mod checkpoint;
pub mod gradcheck;
pub mod layers;
mod model;
mod optim;

pub use checkpoint::Checkpoint;
pub use model::{LossOptions, LossReport, ModelConfig, ModelParams, Pass2, CHUNK};
pub use optim::{AdamW, AdamWConfig};

#[cfg(test)]
mod tests;
