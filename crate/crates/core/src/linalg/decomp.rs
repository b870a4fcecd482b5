//! Jacobi-based factorizations: one-sided Jacobi SVD and cyclic Jacobi
//! symmetric eigendecomposition, plus a small Cholesky used by the GP surrogate.
//!
//! Both Jacobi routines are accurate to a few ulps relative to the largest
//! singular value/eigenvalue, which the loss-identity checks downstream rely on.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 1e-15;

/// Thin SVD `a = u · diag(sigma) · vt` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vt`.
    pub fn reconstruct(&self) -> Matrix {
        let us = self.u.scale_columns(&self.sigma).expect("sigma matches u");
        us.matmul(&self.vt).expect("u and vt chain")
    }

    /// Count of singular values above `rel_tol · sigma_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > rel_tol * top).count()
    }
}

/// Thin singular value decomposition via one-sided (Hestenes) Jacobi.
///
/// Singular values are non-increasing. Each left singular vector has its
/// first nonzero entry non-negative so repeated calls give identical factors.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    if !a.is_finite() {
        return Err(Error::Contract("svd input has non-finite entries".into()));
    }
    let (m, n) = a.shape();
    if m >= n {
        let (u_cols, sigma, v_cols) = one_sided_jacobi(a)?;
        let u = Matrix::from_columns(m, &u_cols);
        let vt = Matrix::from_columns(n, &v_cols).transpose();
        Ok(canonical_signs(SvdFactors { u, sigma, vt }))
    } else {
        let (u_cols, sigma, v_cols) = one_sided_jacobi(&a.transpose())?;
        // aᵀ = U Σ Vᵀ  =>  a = V Σ Uᵀ
        let u = Matrix::from_columns(m, &v_cols);
        let vt = Matrix::from_columns(n, &u_cols).transpose();
        Ok(canonical_signs(SvdFactors { u, sigma, vt }))
    }
}

type JacobiOut = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// Requires `rows >= cols`. Returns (left columns, sigma, right columns), sorted.
fn one_sided_jacobi(a: &Matrix) -> Result<JacobiOut> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n <= 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Factorization {
            rows: m,
            cols: n,
            sweeps: MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let top = norms.iter().fold(0.0f64, |acc, &x| acc.max(x));
    let negligible = top * f64::EPSILON * (m.max(n) as f64);

    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        v_cols.push(v[j].clone());
        if s > negligible && s > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &missing, m);
    Ok((u_cols, sigma, v_cols))
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], dim: usize) {
    let mut candidate = 0usize;
    for &slot in missing {
        loop {
            assert!(candidate < dim, "cannot complete orthonormal basis");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt against the filled columns
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && c.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= proj * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                cols[slot] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

fn first_significant_sign(values: impl Iterator<Item = f64>) -> f64 {
    for v in values {
        if v.abs() > 1e-12 {
            return v.signum();
        }
    }
    1.0
}

fn canonical_signs(mut f: SvdFactors) -> SvdFactors {
    let (m, r) = f.u.shape();
    for j in 0..r {
        let sign = first_significant_sign((0..m).map(|i| f.u[(i, j)]));
        if sign < 0.0 {
            for i in 0..m {
                f.u[(i, j)] = -f.u[(i, j)];
            }
            for k in 0..f.vt.cols() {
                f.vt[(j, k)] = -f.vt[(j, k)];
            }
        }
    }
    f
}

/// Eigendecomposition of a symmetric matrix: `g = vecs · diag(vals) · vecsᵀ`.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Orthonormal eigenvectors as columns.
    pub vectors: Matrix,
    /// Non-increasing eigenvalues.
    pub values: Vec<f64>,
}

impl SymEig {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = self.vectors.scale_columns(&self.values).expect("sizes agree");
        scaled.matmul_t(&self.vectors).expect("sizes agree")
    }
}

/// Cyclic Jacobi eigensolver for symmetric input.
pub fn sym_eig(g: &Matrix) -> Result<SymEig> {
    if !g.is_square() {
        return Err(Error::Contract(format!(
            "sym_eig needs a square matrix, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let asym = g.asymmetry().unwrap_or(0.0);
    let tol = 1e-10 * g.max_abs().max(1.0);
    if asym > tol {
        return Err(Error::Contract(format!(
            "sym_eig input is not symmetric (max |a_ij - a_ji| = {asym:e})"
        )));
    }
    let n = g.rows();
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]));
    let mut v = Matrix::identity(n);

    let mut converged = n <= 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        let scale = a.frobenius_norm();
        if off <= JACOBI_TOL * scale || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if apq.abs() <= 1e-18 * (app.abs() + aqq.abs()) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Factorization {
            rows: n,
            cols: n,
            sweeps: MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    for j in 0..n {
        if first_significant_sign((0..n).map(|i| vectors[(i, j)])) < 0.0 {
            for i in 0..n {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
    Ok(SymEig { vectors, values })
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Contract("cholesky needs a square matrix".into()));
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Contract(format!(
                        "matrix is not positive definite (pivot {i} = {sum:e})"
                    )));
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solves `Lᵀ x = y` for lower-triangular `L`.
pub fn solve_upper_t(l: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.sub(&Matrix::identity(q.cols())).unwrap().frobenius_norm()
    }

    #[test]
    fn identity_singular_values() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(f.sigma, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_singular_values_sorted() {
        let f = svd(&Matrix::from_diag(&[1.0, 3.0, 0.1])).unwrap();
        for (s, e) in f.sigma.iter().zip([3.0, 1.0, 0.1]) {
            assert!((s - e).abs() < 1e-15);
        }
    }

    #[test]
    fn wide_and_rank_deficient_inputs() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 4.0, 6.0, 8.0]]).unwrap();
        let f = svd(&a).unwrap();
        assert_eq!(f.u.shape(), (2, 2));
        assert_eq!(f.vt.shape(), (2, 4));
        assert!(f.sigma[1].abs() < 1e-12);
        assert!(orthonormality_error(&f.u) < 1e-12);
        assert!(orthonormality_error(&f.vt.transpose()) < 1e-12);
        assert!(f.reconstruct().rel_diff(&a) < 1e-14);
        assert_eq!(f.numerical_rank(1e-12), 1);
    }

    #[test]
    fn zero_matrix_svd() {
        let f = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(f.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&f.u) < 1e-14);
    }

    #[test]
    fn sign_convention_holds() {
        let a = Matrix::from_rows(&[vec![-2.0, 1.0], vec![0.5, -3.0], vec![1.0, 1.0]]).unwrap();
        let f = svd(&a).unwrap();
        for j in 0..f.u.cols() {
            let first = (0..f.u.rows()).map(|i| f.u[(i, j)]).find(|v| v.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
        let g = svd(&a).unwrap();
        assert_eq!(f.u, g.u);
        assert_eq!(f.vt, g.vt);
    }

    #[test]
    fn sym_eig_examples() {
        let e = sym_eig(&Matrix::from_diag(&[4.0, 1.0])).unwrap();
        assert_eq!(e.values, vec![4.0, 1.0]);
        assert_eq!(e.vectors, Matrix::identity(2));

        let e = sym_eig(&Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap()).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);

        let e = sym_eig(&Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap()).unwrap();
        assert!((e.values[0] - 2.0).abs() < 1e-14 && e.values[1].abs() < 1e-14);
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&g), Err(Error::Contract(_))));
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(Error::Contract(_))));
    }

    #[test]
    fn cholesky_solves() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let x = solve_upper_t(&l, &solve_lower(&l, &[2.0, 1.0]));
        // a x = b
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
        assert!(cholesky(&Matrix::from_diag(&[1.0, -1.0])).is_err());
    }
}
