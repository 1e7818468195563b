//! Dense matrices, a sparse row-indexed multiply, and the reverse-mode tape.

mod gradcheck;
pub mod linalg;
mod matrix;
mod sparse;
mod tape;

pub use gradcheck::{check_gradients, GradCheck, REL_FLOOR};
pub use matrix::Matrix;
pub use sparse::SparseMatrix;
pub use tape::{Gradients, ParamId, ParamStore, Parameter, Tape, Var, NORM_EPS};

