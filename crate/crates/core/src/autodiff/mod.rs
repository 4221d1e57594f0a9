//! Dense tensors, a dynamic reverse-mode tape, and gradient checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_many, grad_check_with, numerical_jacobian, GradCheckOptions,
    GradCheckReport,
};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;

