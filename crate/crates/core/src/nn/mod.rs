//! Small tensor and backprop engine with a transformer sentence-pair encoder.

mod encoder;
mod optim;
mod params;
mod tape;
mod tensor;
pub mod tokenizer;

pub use encoder::{encode, Dropout, EncoderConfig, EncoderWeights, PairEncoding, ENCODER_PREFIX};
pub use optim::{adamax_step, adamax_update, AdamaxConfig, AdamaxState};
pub use params::{truncated_normal, ParamId, ParamStore, INIT_SIGMA};
pub use tape::{layer_norm_rows, log_softmax_rows, softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use tokenizer::{tokenize, Encoded, Vocab};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss was not produced by this tape")]
    GraphNotRecorded,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
