//! Minimal reverse-mode automatic differentiation over the fixed operator
//! set the embedding backbones need: convolution, batch norm, pointwise ops,
//! linear layers, row normalization, statistics pooling and the combined
//! margin classification loss.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] replays it once in
//! reverse and hands back per-leaf gradients. Parameters live outside the
//! tape and are leased onto it each step as leaves.

pub mod conv;
mod tape;
mod tensor;

pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum GradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Arg(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),
}
