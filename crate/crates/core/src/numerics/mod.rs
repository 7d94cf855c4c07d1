//! Dense tensors, a reverse-mode tape and a finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_gradient, relative_error, DEFAULT_EPS};
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, Binary, Tape, Unary, Var};
pub use tensor::{as_matrix, Real, Tensor};
