//! Dense linear algebra, activations, SGD updates and seeded randomness.

mod matrix;
mod optim;
mod rng;

pub use matrix::{matmul, relu_in_place, softmax_rows, softmax_rows_in_place, Matrix};
pub use optim::{sgd_step, Direction, LrSchedule};
pub use rng::{shuffle_indices, Rng};
