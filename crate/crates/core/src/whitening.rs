//! Channel-weighted whitening.
//!
//! Channels are scored by how strongly they align with the sample-space
//! second-moment structure, the top fraction is amplified by a diagonal
//! scaling `D`, and the whitening factor `S` is the symmetric square root of
//! the (damped) Gram of the amplified activations, so `S Sᵀ = (XD)ᵀ(XD) + λI`.
//! With that choice, dropping singular triple `i` of `W S` changes the layer
//! output on `XD` by exactly `σᵢ` in Frobenius norm (at `λ = 0`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, Matrix, EIG_CLAMP_REL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub alpha: Vec<f64>,
}

impl ChannelImportance {
    /// Channel indices by descending importance, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.alpha.len()).collect();
        order.sort_by(|&i, &j| self.alpha[j].total_cmp(&self.alpha[i]).then(i.cmp(&j)));
        order
    }
}

/// `alpha_j = sqrt(x_jᵀ X Xᵀ x_j) = ‖Xᵀ x_j‖₂`, i.e. the norm of column `j` of `XᵀX`.
pub fn channel_importance(x: &Matrix) -> ChannelImportance {
    let g = x.gram();
    let alpha = (0..g.cols())
        .map(|j| g.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    ChannelImportance { alpha }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaling {
    pub d_diag: Vec<f64>,
    pub amplify: f64,
    pub top_fraction: f64,
}

impl ChannelScaling {
    /// `D = I`.
    pub fn identity(n: usize) -> Self {
        Self {
            d_diag: vec![1.0; n],
            amplify: 1.0,
            top_fraction: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.d_diag.len()
    }

    pub fn amplified(&self) -> Vec<usize> {
        (0..self.d_diag.len())
            .filter(|&j| self.d_diag[j] != 1.0)
            .collect()
    }

    /// `X · D`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        x.scale_columns(&self.d_diag)
    }
}

/// Number of channels amplified for fraction `p` of `n`: `ceil(p·n)`.
pub fn amplified_count(p: f64, n: usize) -> usize {
    if p <= 0.0 || n == 0 {
        return 0;
    }
    // absorb representation error such as 0.07 * 100 = 7.000000000000001
    let raw = p * n as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil().max(1.0) as usize;
    count.min(n)
}

pub fn build_scaling(alpha: &ChannelImportance, a: f64, p: f64) -> Result<ChannelScaling> {
    if !(a >= 1.0) || !a.is_finite() {
        return Err(Error::Contract(format!("amplification a must be >= 1, got {a}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("top fraction p must lie in [0, 1], got {p}")));
    }
    let n = alpha.alpha.len();
    let mut d_diag = vec![1.0; n];
    for &j in alpha.ranking().iter().take(amplified_count(p, n)) {
        d_diag[j] = a;
    }
    Ok(ChannelScaling {
        d_diag,
        amplify: a,
        top_fraction: p,
    })
}

#[derive(Debug, Clone)]
pub struct WhiteningTransform {
    pub s: Matrix,
    pub s_inv: Matrix,
    pub scaling: ChannelScaling,
    pub damping: f64,
}

impl WhiteningTransform {
    /// `S = S⁻¹ = I`: compression reduces to plain truncated SVD of the weight.
    pub fn identity(n: usize) -> Self {
        Self {
            s: Matrix::identity(n),
            s_inv: Matrix::identity(n),
            scaling: ChannelScaling::identity(n),
            damping: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.s.rows()
    }
}

/// `1e-6 · trace(G) / n`, the default damping for a channel Gram `G`.
pub fn default_damping(gram: &Matrix) -> f64 {
    let n = gram.rows().max(1) as f64;
    1e-6 * gram.trace() / n
}

/// Builds `S = U Σ^{1/2} Uᵀ` and `S⁻¹ = U Σ^{-1/2} Uᵀ` from
/// `G = Dᵀ Xᵀ X D + λI = U Σ Uᵀ`.
pub fn build_whitening(
    x: &Matrix,
    scaling: &ChannelScaling,
    lambda: f64,
) -> Result<WhiteningTransform> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Contract(format!("damping lambda must be >= 0, got {lambda}")));
    }
    if scaling.channels() != x.cols() {
        return Err(Error::shape(
            "build_whitening",
            format!("{} channels", x.cols()),
            format!("scaling over {} channels", scaling.channels()),
        ));
    }
    let xd = scaling.apply(x)?;
    let mut g = xd.gram();
    for i in 0..g.rows() {
        g[(i, i)] += lambda;
    }
    whitening_from_gram(&g, scaling.clone(), lambda)
}

pub(crate) fn whitening_from_gram(
    g: &Matrix,
    scaling: ChannelScaling,
    lambda: f64,
) -> Result<WhiteningTransform> {
    let eig = sym_eig(g)?;
    let largest = eig.values.first().copied().unwrap_or(0.0);
    let smallest = eig.values.last().copied().unwrap_or(0.0);
    let threshold = EIG_CLAMP_REL * largest.max(0.0);
    if largest <= 0.0 || smallest < threshold {
        return Err(Error::SingularWhitening {
            smallest,
            largest,
            threshold,
        });
    }
    let root: Vec<f64> = eig.values.iter().map(|v| v.sqrt()).collect();
    let inv_root: Vec<f64> = root.iter().map(|r| 1.0 / r).collect();
    let u = &eig.vectors;
    let s = u.scale_columns(&root)?.matmul_t(u)?;
    let s_inv = u.scale_columns(&inv_root)?.matmul_t(u)?;
    Ok(WhiteningTransform {
        s,
        s_inv,
        scaling,
        damping: lambda,
    })
}
