pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod sequence;
pub mod worked_example;

pub use sequence::{
    brute_force_max_sequence, confidence, nll_loss_and_grad, predict_max_sequence, sequence_log_prob,
    HeadLogits, SequenceDistribution, SequenceLabel, Transcription,
};
