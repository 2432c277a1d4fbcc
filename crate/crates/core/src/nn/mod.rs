//! Differentiable building blocks: tensors, the autodiff tape, parameter
//! storage and optimization, recurrent cells, attention and the transformer
//! decoder, plus a finite-difference gradient checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod onlstm;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod transformer;

pub use params::{Adam, Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
