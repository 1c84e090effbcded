//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are `f64` throughout. Forward ops append to a [`Tape`]; a single
//! reverse sweep fills the gradient slots of trainable leaves.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    check_gradients, finite_diff_check, relative_error, CheckOptions, GradCheckReport, DEFAULT_STEP,
};
pub use tape::{sigmoid, ConvGeometry, Tape, Var, LOG_EPS};
pub(crate) use tape::dot;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
