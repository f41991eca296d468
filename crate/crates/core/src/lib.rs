//! Multi-modal selective vision transformer.
//!
//! Fundus and OCT images are patch-embedded alongside table tokens built
//! from a patient's record. A stack of selective transformer blocks attends
//! only over the top-scoring image tokens, fuses CNN features of their
//! source patches, and records which tokens were picked. A shared head
//! predicts two gene labels and reconstructs the record.

pub mod data;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod nn;
pub mod selective;
pub mod tensor;
pub mod train;
pub mod visualization;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
