//! Minimal reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records each operation as it executes; [`Tape::backward`]
//! replays the adjoints in reverse order from a scalar root. The operator
//! set is exactly what the vector-field model and its training loop use:
//! matmul, add/sub/mul with single-row broadcast, scalar scaling, concat,
//! slicing, row softmax, layer norm, depthwise 1-D convolution, embedding
//! gather, mean pooling and GELU.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, rel_error};
pub use params::{BoundParams, Params};
pub use tape::{Axis, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Real, Tensor};
