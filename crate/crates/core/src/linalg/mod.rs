//! Dense real-matrix foundation shared by every other module.

mod decomp;
mod matrix;
mod random;
mod stats;

pub use decomp::{cholesky, solve_lower, solve_upper_t, svd, sym_eig, SvdFactors, SymEig};
pub use matrix::{frobenius_norm, Matrix};
pub use random::{gaussian_matrix, random_orthonormal, seeded_rng, SeededRng};
pub use stats::{mean, pearson};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const EIG_CLAMP_REL: f64 = 1e-12;
