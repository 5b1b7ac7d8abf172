//! Dense `f64` tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradients, gradient_check, gradient_report, numerical_gradients, relative_error,
    CheckOptions, ParamCheck, DEFAULT_STEP,
};
pub use tape::{concat_cols, concat_rows, Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Mean over the token rows of an `L × d` matrix.
pub fn mean_pool(tokens: Var<'_>) -> crate::Result<Var<'_>> {
    tokens.mean_rows()
}
