//! Dense matrices, seeded randomness and the on-disk tensor format.

pub mod io;
mod matrix;
pub mod rng;

pub use io::{load_tensor, save_tensor, CodeMatrix, Tensor};
pub use matrix::{group_expand, group_sum, matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{rng_normal, Rng};
