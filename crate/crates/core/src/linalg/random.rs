use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::{dot, Matrix};

/// Deterministic random stream used throughout the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix of i.i.d. standard normal entries.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `rows × cols` matrix with orthonormal columns (`rows >= cols`), drawn by
/// Gram-Schmidt on a Gaussian matrix.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    assert!(rows >= cols, "need rows >= cols for orthonormal columns");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= p * bi;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_columns(rows, &basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream() {
        let mut a = seeded_rng(42);
        let mut b = seeded_rng(42);
        let xs: Vec<u64> = (0..100).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = seeded_rng(1);
        let mut b = seeded_rng(2);
        let xs: Vec<u64> = (0..100).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.random()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn uniform_mean_converges() {
        let mut rng = seeded_rng(7);
        let n = 1_000_000;
        let mean = (0..n).map(|_| rng.random::<f64>()).sum::<f64>() / n as f64;
        assert!((0.499..=0.501).contains(&mean), "mean {mean}");
    }

    #[test]
    fn orthonormal_columns() {
        let mut rng = seeded_rng(3);
        let q = random_orthonormal(9, 4, &mut rng);
        let g = q.t_matmul(&q).unwrap();
        assert!(g.rel_diff(&Matrix::identity(4)) < 1e-14);
    }
}
