//! Dense linear algebra, elementwise kernels and random numbers.
//!
//! All reductions use a fixed accumulation order so results are bit-identical
//! across runs and thread counts.

mod matrix;
mod real;
mod rng;

pub use matrix::{
    axpy, dot, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, uniform_init, Matrix, Vector,
};
pub use real::Real;
pub use rng::Rng;
