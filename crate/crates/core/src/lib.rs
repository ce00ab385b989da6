//! Sequence-transfer toolkit: an attentional translation model whose frozen
//! bidirectional-LSTM encoder supplies per-token context vectors to a
//! biattentive text classifier. Built on a reverse-mode tape with a
//! finite-difference gradient oracle.

pub mod embed;
pub mod error;
pub mod nn;
pub mod gradcheck;
pub mod params;
pub mod seq2seq;
pub mod tape;
pub mod tensor;
mod util;

pub use error::{Error, Result};
pub use tape::{Gradients, NodeId, ReduceKind, Tape};
pub use tensor::{Dtype, Real, Tensor};
