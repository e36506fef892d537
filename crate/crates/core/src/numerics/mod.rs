//! Dense matrices, deterministic randomness, the null-space solver and
//! gradient utilities shared by every other module.

mod gradcheck;
mod matrix;
mod nullspace;
mod optim;
mod rng;

pub(crate) mod math;

pub use gradcheck::check_gradient;
pub use matrix::Matrix;
pub use nullspace::{nullspace, singular_values, NullSpace, DEFAULT_RANK_TOL};
pub use optim::{Adam, AdamConfig};
pub use rng::Rng;
