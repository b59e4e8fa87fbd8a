//! Dense linear algebra, nonlinearities, seeded sampling and the reduced SVD.

pub mod matrix;
pub mod ops;
pub mod random;
pub mod svd;

pub use matrix::{axpy, cosine, dot, gemm, gemm_nt, gemm_tn, norm, Matrix, Vector};
pub use ops::{layer_norm, relu, softmax_rows, LN_EPS};
pub use random::{derive_seed, noise_seed, sample_gaussian, GaussianStream};
pub use svd::{reduced_svd, SvdFactors};
