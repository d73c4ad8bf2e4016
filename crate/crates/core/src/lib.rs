//! Desk-scale speaker-verification toolkit.
//!
//! The pipeline: 8 kHz WAV input → log-mel features with energy VAD and
//! sliding mean normalization → ResNet / RepVGG embedding extractors with
//! global statistics pooling, trained in two stages with a combined-margin
//! softmax → cosine trial scoring → calibration, fusion and detection-cost
//! metrics. A synthetic corpus generator makes the whole chain runnable end
//! to end without any licensed audio.

pub mod audio;
pub mod augment;
pub mod backend;
pub mod ckpt;
pub mod corpus;
pub mod grad;
pub mod loss;
pub mod nets;
pub mod score;
pub mod train;

pub use grad::{GradError, Tensor};

use thiserror::Error;

/// Crate-wide error aggregating the per-subsystem errors.
#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Grad(#[from] grad::GradError),
    #[error(transparent)]
    Net(#[from] nets::NetError),
    #[error(transparent)]
    Loss(#[from] loss::LossError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Score(#[from] score::ScoreError),
    #[error(transparent)]
    Backend(#[from] backend::BackendError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Ckpt(#[from] ckpt::CkptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
