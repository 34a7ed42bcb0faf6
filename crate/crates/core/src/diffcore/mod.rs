//! Dense arrays with reverse-mode differentiation, sized for the MUSIC loss
//! graph: matrix products, row broadcasting, elementwise products, ReLU,
//! last-axis softmax, clamped log, reductions and reshapes.

mod array;
mod gradcheck;
mod tape;

pub use array::{clamped_ln, matmul, softmax_last, Array, Precision, LOG_EPS};
pub use gradcheck::{grad_check, relative_error, Discrepancy, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var};
