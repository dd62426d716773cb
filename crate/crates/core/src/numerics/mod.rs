//! Dense matrices, tape-based differentiation, seeded randomness and Adam.

mod adam;
mod matrix;
mod rng;
mod tape;

pub use adam::AdamState;
pub use matrix::Matrix;
pub use rng::SeededRng;
pub use tape::{bce_with_logit, pooled_sum, sigmoid, Gradients, Tape, Var};

