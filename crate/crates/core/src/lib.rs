//! Conformer-R: a Conformer encoder trained with R-Drop regularized
//! CTC/attention hybrid loss, implemented on a small reverse-mode tape.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod training;
pub mod vocab;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{Graph, RngState, Tensor, Var};
