//! Dense linear algebra, activation/loss primitives and the seeded random
//! source shared by the rest of the crate. Everything is `f64`.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{
    cholesky, cholesky_log_det, cholesky_solve, cross_entropy_with_grad, forward_substitute,
    log_sum_exp, sigmoid, softmax, softplus, sym_eigh, sym_eigh_leading,
};
pub(crate) use linalg::{cross_entropy_unchecked, softmax_unchecked};
pub use matrix::{axpy, dot, sq_dist, Matrix};
pub use rng::Rng;
