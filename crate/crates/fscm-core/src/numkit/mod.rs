//! Minimal dense numeric kernel: f64 tensors, named parameter sets and a
//! reverse-mode tape sufficient to train the click models end to end.

mod params;
mod tape;
mod tensor;

pub use params::{GradBuf, ParamEntry, ParamKind, ParamSet};
pub use tape::{
    central_difference, gru_cell, sigmoid, softmax_values, GruWeights, Tape, VarId, PROB_CLAMP,
};
pub use tensor::Tensor;
