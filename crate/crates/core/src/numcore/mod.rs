//! Dense matrices and reverse-mode differentiation of scalar losses.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{check_gradient, GradCheckReport};
pub use matrix::Matrix;
pub(crate) use tape::row_softmax;
pub use tape::{sigmoid, Tape, Var};
