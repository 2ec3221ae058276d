//! Dense numeric kernel: row-major matrices, masked softmax, layer norm, parameters and a
//! recorded reverse-mode tape.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use layers::{attention, layernorm, LayerNorm, Linear, TransformerLayer};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{masked_softmax, Mask, Real, Tensor};

/// Layer-norm epsilon used by every model.
pub const LAYERNORM_EPS: f64 = 1e-5;
