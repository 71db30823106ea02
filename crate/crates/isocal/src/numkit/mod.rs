//! Numerical substrate: dense matrices, thin SVD, seeded RNG, and the
//! finite-difference gradient oracle.

pub mod grad;
pub mod mat;
pub mod rng;
pub mod svd;

pub use grad::{finite_diff_grad, max_rel_err};
pub use mat::{axpy, dot, norm, EmbeddingMatrix, Mat};
pub use rng::{derive_seed, SeededRng, RNG_ALGORITHM};
pub use svd::{gram_eigvectors, right_singular_basis, svd, SvdFactors};
