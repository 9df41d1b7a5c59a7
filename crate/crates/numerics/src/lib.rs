//! Minimal dense-tensor math for the extraction model: row-major `f64`
//! tensors, a per-forward-pass tape for reverse-mode gradients, Adam, a
//! central-difference gradient checker and a bit-exact checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod optim;
mod param;
mod rng;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamGrads, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{log_sum_exp, sigmoid, Tensor, LAYER_NORM_EPS};
