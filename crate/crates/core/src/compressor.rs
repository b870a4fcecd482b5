//! Truncated SVD of whitened weights and low-rank factor construction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::CompressionPlan;
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix, SvdFactors};
use crate::model::{Activation, CompressedModel, CompressedWeight, ToyModel, WeightMatrix};
use crate::whitening::{ChannelScaling, WhiteningTransform};

/// Relative cutoff below which singular values count as zero for rank.
pub const SIGMA_ZERO_REL: f64 = 1e-12;

/// Largest rank whose factor pair fits `preserved · d_out · n` parameters
/// (`floor(preserved · d_out · n / (d_out + n))`), never below 1.
pub fn rank_from_ratio(d_out: usize, n: usize, preserved: f64) -> Result<usize> {
    if !(preserved > 0.0 && preserved <= 1.0) {
        return Err(Error::Contract(format!(
            "preserved ratio must lie in (0, 1], got {preserved}"
        )));
    }
    if d_out == 0 || n == 0 {
        return Err(Error::Contract(format!("cannot compress a {d_out}x{n} weight")));
    }
    let budget = preserved * d_out as f64 * n as f64 / (d_out + n) as f64;
    Ok((budget.floor() as usize).max(1))
}

/// `w ≈ w_u · w_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    /// `d_out × rank`
    pub w_u: Matrix,
    /// `rank × n`
    pub w_v: Matrix,
    pub rank: usize,
    pub preserved_ratio: f64,
}

impl LowRankFactors {
    pub fn parameter_count(&self) -> usize {
        self.rank * (self.w_u.rows() + self.w_v.cols())
    }

    pub fn product(&self) -> Matrix {
        self.w_u.matmul(&self.w_v).expect("factor shapes chain")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionLoss {
    /// Root-sum-square of the dropped singular values of `W·S`.
    pub predicted: f64,
    /// Frobenius norm of the output change on calibration data, when measured.
    pub observed: Option<f64>,
}

/// SVD of the whitened weight `W·S`, kept so several ranks can be cut from one factorization.
#[derive(Debug, Clone)]
pub struct WhitenedSvd {
    pub factors: SvdFactors,
    s_inv: Matrix,
    d_out: usize,
    n: usize,
}

impl WhitenedSvd {
    pub fn new(w: &WeightMatrix, wt: &WhiteningTransform) -> Result<Self> {
        let (d_out, n) = w.w.shape();
        if wt.channels() != n {
            return Err(Error::shape(
                format!("layer {} weight {}", w.layer, w.name),
                format!("whitening over {n} channels"),
                format!("whitening over {} channels", wt.channels()),
            ));
        }
        let ws = w.w.matmul(&wt.s)?;
        Ok(Self {
            factors: svd(&ws)?,
            s_inv: wt.s_inv.clone(),
            d_out,
            n,
        })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.factors.sigma
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d_out, self.n)
    }

    /// Numerical rank of `W·S`.
    pub fn rank(&self) -> usize {
        self.factors.numerical_rank(SIGMA_ZERO_REL)
    }

    /// Factors built from the listed singular triples only.
    pub fn factors_keeping(&self, kept: &[usize], preserved_ratio: f64) -> LowRankFactors {
        let r = kept.len();
        let u = &self.factors.u;
        let vt = &self.factors.vt;
        let roots: Vec<f64> = kept.iter().map(|&i| self.factors.sigma[i].sqrt()).collect();
        let w_u = Matrix::from_fn(self.d_out, r, |i, j| u[(i, kept[j])] * roots[j]);
        let v_scaled = Matrix::from_fn(r, self.n, |i, j| roots[i] * vt[(kept[i], j)]);
        let w_v = v_scaled.matmul(&self.s_inv).expect("vt and s_inv chain");
        LowRankFactors {
            w_u,
            w_v,
            rank: r,
            preserved_ratio,
        }
    }

    /// `sqrt(Σ_{i ∉ kept} σᵢ²)`.
    pub fn predicted_loss_dropping(&self, dropped: &[usize]) -> f64 {
        dropped
            .iter()
            .map(|&i| self.factors.sigma[i] * self.factors.sigma[i])
            .sum::<f64>()
            .sqrt()
    }

    /// Keeps the top `rank_from_ratio` triples.
    pub fn compress(&self, preserved: f64) -> Result<(LowRankFactors, CompressionLoss)> {
        let rank = rank_from_ratio(self.d_out, self.n, preserved)?.min(self.factors.sigma.len());
        let kept: Vec<usize> = (0..rank).collect();
        let dropped: Vec<usize> = (rank..self.factors.sigma.len()).collect();
        Ok((
            self.factors_keeping(&kept, preserved),
            CompressionLoss {
                predicted: self.predicted_loss_dropping(&dropped),
                observed: None,
            },
        ))
    }
}

/// Compresses one weight: SVD of `w·s`, truncation to the rank budget, and
/// `w_u = U·Σ^{1/2}`, `w_v = Σ^{1/2}·Vᵀ·s⁻¹`.
pub fn compress_weight(
    w: &WeightMatrix,
    wt: &WhiteningTransform,
    preserved: f64,
) -> Result<(LowRankFactors, CompressionLoss)> {
    WhitenedSvd::new(w, wt)?.compress(preserved)
}

/// `‖(XD)·wᵀ − (XD)·(w_u·w_v)ᵀ‖_F`.
pub fn truncation_loss_observed(
    w: &WeightMatrix,
    factors: &LowRankFactors,
    x: &Matrix,
    scaling: &ChannelScaling,
) -> Result<f64> {
    let approx = factors.w_u.matmul(&factors.w_v)?;
    let delta = w.w.sub(&approx)?;
    let xd = scaling.apply(x)?;
    Ok(xd.matmul_t(&delta)?.frobenius_norm())
}

/// Whitened factorizations of every weight of a model, reusable across plans.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    weights: Vec<PreparedWeight>,
    layer_count: usize,
    activation: Activation,
}

#[derive(Debug, Clone)]
struct PreparedWeight {
    layer: usize,
    name: String,
    svd: WhitenedSvd,
}

impl PreparedModel {
    /// `transforms` holds one whitening per weight, in forward order.
    pub fn new(model: &ToyModel, transforms: &[WhiteningTransform]) -> Result<Self> {
        let weights: Vec<&WeightMatrix> = model.weights().collect();
        if weights.len() != transforms.len() {
            return Err(Error::shape(
                "whitening transforms",
                format!("{} (one per weight)", weights.len()),
                transforms.len(),
            ));
        }
        let prepared = weights
            .par_iter()
            .zip(transforms.par_iter())
            .map(|(w, wt)| {
                Ok(PreparedWeight {
                    layer: w.layer,
                    name: w.name.clone(),
                    svd: WhitenedSvd::new(w, wt)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights: prepared,
            layer_count: model.layer_count(),
            activation: model.activation(),
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    /// Whitened SVD of each weight, forward order.
    pub fn whitened(&self) -> impl Iterator<Item = (usize, &str, &WhitenedSvd)> {
        self.weights.iter().map(|w| (w.layer, w.name.as_str(), &w.svd))
    }

    /// Applies per-layer preservation ratios to every weight of each layer.
    pub fn compress(&self, preserve: &[f64]) -> Result<(CompressedModel, Vec<CompressionLoss>)> {
        if preserve.len() != self.layer_count {
            return Err(Error::shape(
                "compression plan",
                format!("{} layers", self.layer_count),
                format!("{} ratios", preserve.len()),
            ));
        }
        let results = self
            .weights
            .par_iter()
            .map(|w| w.svd.compress(preserve[w.layer]))
            .collect::<Result<Vec<_>>>()?;
        let mut layers: Vec<Vec<CompressedWeight>> = vec![Vec::new(); self.layer_count];
        let mut losses = Vec::with_capacity(results.len());
        for (w, (factors, loss)) in self.weights.iter().zip(results) {
            layers[w.layer].push(CompressedWeight {
                layer: w.layer,
                name: w.name.clone(),
                factors,
            });
            losses.push(loss);
        }
        Ok((
            CompressedModel {
                layers,
                activation: self.activation,
            },
            losses,
        ))
    }
}

/// Replaces every weight by its factor pair; layer `l` keeps `plan.preserve[l]`.
pub fn compress_model(
    model: &ToyModel,
    plan: &CompressionPlan,
    transforms: &[WhiteningTransform],
) -> Result<CompressedModel> {
    if plan.preserve.len() != model.layer_count() {
        return Err(Error::shape(
            "compression plan",
            format!("{} layers", model.layer_count()),
            format!("{} ratios", plan.preserve.len()),
        ));
    }
    let prepared = PreparedModel::new(model, transforms)?;
    Ok(prepared.compress(&plan.preserve)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRecord {
    pub layer: usize,
    pub name: String,
    pub d_out: usize,
    pub n: usize,
    pub rank: usize,
    pub dense_macs: u64,
    pub factored_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub seq_len: usize,
    pub per_weight: Vec<FlopsRecord>,
    pub total_dense_macs: u64,
    pub total_factored_macs: u64,
    /// `1 − factored / dense`.
    pub reduction_ratio: f64,
}

/// Dense `d_out·n·p` and factored `rank·p·(d_out + n)` multiply-accumulates.
pub fn weight_macs(d_out: usize, n: usize, rank: usize, seq_len: usize) -> (u64, u64) {
    let p = seq_len as u64;
    (
        d_out as u64 * n as u64 * p,
        rank as u64 * p * (d_out as u64 + n as u64),
    )
}

pub fn flops_report(
    original: &ToyModel,
    compressed: &CompressedModel,
    seq_len: usize,
) -> Result<FlopsReport> {
    let dense: Vec<&WeightMatrix> = original.weights().collect();
    let factored: Vec<&CompressedWeight> = compressed.weights().collect();
    if dense.len() != factored.len() {
        return Err(Error::shape("flops report", dense.len(), factored.len()));
    }
    let mut per_weight = Vec::with_capacity(dense.len());
    for (w, c) in dense.iter().zip(&factored) {
        let (d_out, n) = w.w.shape();
        let (dense_macs, factored_macs) = weight_macs(d_out, n, c.factors.rank, seq_len);
        per_weight.push(FlopsRecord {
            layer: w.layer,
            name: w.name.clone(),
            d_out,
            n,
            rank: c.factors.rank,
            dense_macs,
            factored_macs,
        });
    }
    let total_dense_macs: u64 = per_weight.iter().map(|r| r.dense_macs).sum();
    let total_factored_macs: u64 = per_weight.iter().map(|r| r.factored_macs).sum();
    let reduction_ratio = if total_dense_macs == 0 {
        0.0
    } else {
        1.0 - total_factored_macs as f64 / total_dense_macs as f64
    };
    Ok(FlopsReport {
        seq_len,
        per_weight,
        total_dense_macs,
        total_factored_macs,
        reduction_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, seeded_rng};

    fn weight(w: Matrix) -> WeightMatrix {
        WeightMatrix {
            w,
            layer: 0,
            name: "attn".into(),
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_from_ratio(4096, 4096, 0.6).unwrap(), 1228);
        assert_eq!(rank_from_ratio(10, 10, 1.0).unwrap(), 5);
        assert_eq!(rank_from_ratio(6, 4, 0.5).unwrap(), 1);
        assert_eq!(rank_from_ratio(6, 4, 0.01).unwrap(), 1);
        assert!(rank_from_ratio(6, 4, 0.0).is_err());
        assert!(rank_from_ratio(6, 4, 1.2).is_err());
    }

    #[test]
    fn no_truncation_reconstructs() {
        let mut rng = seeded_rng(1);
        // rank 2, so a 2-rank budget loses nothing
        let w = gaussian_matrix(6, 2, &mut rng).matmul(&gaussian_matrix(2, 6, &mut rng)).unwrap();
        let x = gaussian_matrix(30, 6, &mut rng);
        let wt = crate::whitening::build_whitening(&x, &ChannelScaling::identity(6), 0.0).unwrap();
        let (f, loss) = compress_weight(&weight(w.clone()), &wt, 1.0).unwrap();
        assert_eq!(f.rank, 3);
        assert!(loss.predicted <= 1e-12 * w.frobenius_norm());
        assert!(f.product().rel_diff(&w) < 1e-8);
    }

    #[test]
    fn zero_weight() {
        let (f, loss) =
            compress_weight(&weight(Matrix::zeros(4, 4)), &WhiteningTransform::identity(4), 0.5)
                .unwrap();
        assert_eq!(loss.predicted, 0.0);
        assert_eq!(f.product().max_abs(), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = compress_weight(&weight(Matrix::zeros(4, 3)), &WhiteningTransform::identity(4), 0.5)
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn exact_factors_have_zero_observed_loss() {
        let mut rng = seeded_rng(2);
        let w = gaussian_matrix(3, 3, &mut rng);
        let x = gaussian_matrix(10, 3, &mut rng);
        let f = LowRankFactors {
            w_u: w.clone(),
            w_v: Matrix::identity(3),
            rank: 3,
            preserved_ratio: 1.0,
        };
        let loss = truncation_loss_observed(&weight(w), &f, &x, &ChannelScaling::identity(3)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn break_even_rank_has_no_flops_gain() {
        let (dense, factored) = weight_macs(10, 10, 5, 7);
        assert_eq!(dense, factored);
        let (dense, factored) = weight_macs(4096, 4096, 1228, 1);
        let r = 1.0 - factored as f64 / dense as f64;
        assert!((r - 0.40).abs() <= 0.001);
    }
}
