//! Dense `f64` tensors with tape-based reverse-mode automatic
//! differentiation, the layer primitives needed by a recurrent
//! encoder-decoder, the Adam optimizer, finite-difference gradient
//! checking and a portable checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layers::{bilstm, dropout, lstm_cell, lstm_sequence, Linear, LstmState, LstmWeights};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
