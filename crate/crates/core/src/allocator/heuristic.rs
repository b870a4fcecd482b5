//! Sensitivity/effective-rank heuristic allocation.
//!
//! Each layer gets a Fisher-style sensitivity (sum over its weights of
//! `‖∇w‖_F / ‖w‖_F`) and an effective rank of its hidden state (the smallest
//! spectral prefix holding a `tau` fraction of the energy). Both are min-max
//! normalized, combined as `S̃^β · R̃^{1−β}`, and turned into preservation
//! ratios proportional to the combined score with the mean fixed at `1 − k`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_k, water_fill, CompressionPlan, Redistribution, DEFAULT_P_MIN};
use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, svd, Matrix};
use crate::model::{gradients, ToyModel};

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_TAU: f64 = 0.95;
/// Offset added after min-max normalization so no score is exactly zero.
pub const NORMALIZATION_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnergyMode {
    /// Cumulative sum of singular values.
    Values,
    /// Cumulative sum of squared singular values.
    #[default]
    Squares,
}

impl std::str::FromStr for EnergyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "values" => Ok(EnergyMode::Values),
            "squares" => Ok(EnergyMode::Squares),
            other => Err(Error::Config(format!("unknown energy mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub fisher: Vec<f64>,
    pub eff_rank: Vec<f64>,
    pub combined: Vec<f64>,
    pub beta: f64,
    pub threshold: f64,
    pub energy_mode: EnergyMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub beta: f64,
    pub tau: f64,
    pub energy_mode: EnergyMode,
    pub p_min: f64,
    /// Calibration rows per batch; sensitivities and ranks are batch-averaged.
    pub batch_size: usize,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            tau: DEFAULT_TAU,
            energy_mode: EnergyMode::Squares,
            p_min: DEFAULT_P_MIN,
            batch_size: 64,
        }
    }
}

fn batches(x: &Matrix, batch_size: usize) -> Vec<Matrix> {
    let size = batch_size.max(1);
    (0..x.rows())
        .step_by(size)
        .map(|start| x.row_range(start, start + size))
        .collect()
}

/// Per-layer `Σ_w ‖∂loss/∂w‖_F / (‖w‖_F + ε)`, averaged over row batches of `x`.
pub fn fisher_sensitivity(
    model: &ToyModel,
    x: &Matrix,
    target: &Matrix,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if target.rows() != x.rows() {
        return Err(Error::shape("fisher target", x.rows(), target.rows()));
    }
    let xs = batches(x, batch_size);
    let ts = batches(target, batch_size);
    let norms: Vec<f64> = model.weights().map(|w| w.w.frobenius_norm()).collect();
    let layer_of: Vec<usize> = model.weights().map(|w| w.layer).collect();
    let mut sens = vec![0.0; model.layer_count()];
    for (xb, tb) in xs.iter().zip(&ts) {
        let g = gradients(model, xb, tb)?;
        for (k, grad) in g.grads.iter().enumerate() {
            sens[layer_of[k]] += grad.frobenius_norm() / (norms[k] + NORM_EPS);
        }
    }
    let count = xs.len().max(1) as f64;
    sens.iter_mut().for_each(|s| *s /= count);
    Ok(sens)
}

/// Teacher output plus seeded Gaussian noise of `noise_frac · RMS(output)`.
///
/// At the teacher output itself the squared-error gradient vanishes, so the
/// sensitivity is measured against targets sampled around it, in the manner
/// of a Monte-Carlo Fisher estimate.
pub fn sampled_target(model: &ToyModel, x: &Matrix, noise_frac: f64, seed: u64) -> Result<Matrix> {
    let (out, _) = model.forward(x)?;
    let rms = out.frobenius_norm() / (out.as_slice().len().max(1) as f64).sqrt();
    let std = (noise_frac * rms).max(f64::MIN_POSITIVE);
    let normal = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
    let mut rng = seeded_rng(seed);
    let data = out.as_slice().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Matrix::new(out.rows(), out.cols(), data)
}

/// Smallest `k` whose cumulative energy fraction reaches `tau`.
pub fn effective_rank(hidden: &Matrix, tau: f64, mode: EnergyMode) -> Result<usize> {
    check_tau(tau)?;
    let sigma = svd(hidden)?.sigma;
    let energy: Vec<f64> = match mode {
        EnergyMode::Values => sigma,
        EnergyMode::Squares => sigma.iter().map(|s| s * s).collect(),
    };
    let total: f64 = energy.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSpectrum(format!(
            "all-zero {}x{} hidden state",
            hidden.rows(),
            hidden.cols()
        )));
    }
    let mut cum = 0.0;
    for (k, e) in energy.iter().enumerate() {
        cum += e;
        if cum / total >= tau {
            return Ok(k + 1);
        }
    }
    Ok(energy.len())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Contract(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

/// Batch-averaged effective rank of every layer's hidden state.
pub fn layer_effective_ranks(
    model: &ToyModel,
    x: &Matrix,
    tau: f64,
    mode: EnergyMode,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let xs = batches(x, batch_size);
    let mut ranks = vec![0.0; model.layer_count()];
    for xb in &xs {
        let (_, hidden) = model.forward(xb)?;
        for (l, h) in hidden.iter().enumerate() {
            ranks[l] += effective_rank(h, tau, mode)? as f64;
        }
    }
    let count = xs.len().max(1) as f64;
    ranks.iter_mut().for_each(|r| *r /= count);
    Ok(ranks)
}

/// `(v − min) / (max − min) + ε`; a constant vector maps to `1 + ε`.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (v - min) / range + NORMALIZATION_EPS
            } else {
                1.0 + NORMALIZATION_EPS
            }
        })
        .collect()
}

pub fn combine_scores(
    fisher: &[f64],
    eff_rank: &[f64],
    beta: f64,
    tau: f64,
    energy_mode: EnergyMode,
) -> Result<LayerScores> {
    if fisher.len() != eff_rank.len() {
        return Err(Error::shape("combine_scores", fisher.len(), eff_rank.len()));
    }
    if fisher.is_empty() {
        return Err(Error::Contract("no layers to score".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Contract(format!("beta must lie in [0, 1], got {beta}")));
    }
    let s = min_max_normalize(fisher);
    let r = min_max_normalize(eff_rank);
    let combined = s
        .iter()
        .zip(&r)
        .map(|(a, b)| a.powf(beta) * b.powf(1.0 - beta))
        .collect();
    Ok(LayerScores {
        fisher: fisher.to_vec(),
        eff_rank: eff_rank.to_vec(),
        combined,
        beta,
        threshold: tau,
        energy_mode,
    })
}

/// Preservation ratios proportional to the combined scores, clamped to
/// `[p_min, 1]` with the mean held at `1 − k`.
pub fn allocate(scores: &LayerScores, k: f64, p_min: f64) -> Result<CompressionPlan> {
    allocate_from_importance(&scores.combined, k, p_min)
}

pub fn allocate_from_importance(q: &[f64], k: f64, p_min: f64) -> Result<CompressionPlan> {
    check_k(k)?;
    if !(p_min >= 0.0) {
        return Err(Error::Contract(format!("p_min must be >= 0, got {p_min}")));
    }
    if p_min > 1.0 - k + super::BUDGET_TOL {
        return Err(Error::Infeasible(format!(
            "p_min {p_min} exceeds the mean preservation {}",
            1.0 - k
        )));
    }
    let preserve = water_fill(q, 1.0 - k, p_min, 1.0, Redistribution::Proportional)?;
    Ok(CompressionPlan {
        preserve,
        target_k: k,
    })
}

/// Scores for every layer of `model` from calibration input `x` and loss target.
pub fn score_layers(
    model: &ToyModel,
    x: &Matrix,
    target: &Matrix,
    cfg: &HeuristicConfig,
) -> Result<LayerScores> {
    check_tau(cfg.tau)?;
    let fisher = fisher_sensitivity(model, x, target, cfg.batch_size)?;
    let ranks = layer_effective_ranks(model, x, cfg.tau, cfg.energy_mode, cfg.batch_size)?;
    combine_scores(&fisher, &ranks, cfg.beta, cfg.tau, cfg.energy_mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use crate::model::{Activation, Layer, ModelSpec, WeightMatrix};

    #[test]
    fn effective_rank_examples() {
        let h = Matrix::from_diag(&[3.0, 1.0, 0.1]);
        assert_eq!(effective_rank(&h, 0.95, EnergyMode::Values).unwrap(), 2);
        for tau in [0.1, 0.5, 0.77, 0.95, 0.999] {
            let expected = (tau * 10.0f64).ceil() as usize;
            assert_eq!(effective_rank(&Matrix::identity(10), tau, EnergyMode::Squares).unwrap(), expected);
        }
        let r1 = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        for tau in [0.1, 0.9, 0.999] {
            assert_eq!(effective_rank(&r1, tau, EnergyMode::Values).unwrap(), 1);
        }
        assert!(matches!(
            effective_rank(&Matrix::zeros(3, 3), 0.5, EnergyMode::Values),
            Err(Error::DegenerateSpectrum(_))
        ));
        assert!(effective_rank(&h, 1.0, EnergyMode::Values).is_err());
    }

    #[test]
    fn fisher_zero_gradients() {
        let mut rng = seeded_rng(1);
        let m = ToyModel::random(&ModelSpec::new(2, 3, 3, 1), &mut rng);
        let x = gaussian_matrix(8, 3, &mut rng);
        let t = m.forward(&x).unwrap().0;
        let s = fisher_sensitivity(&m, &x, &t, 4).unwrap();
        assert!(s.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn fisher_single_layer_by_hand() {
        let mut rng = seeded_rng(2);
        let wa = gaussian_matrix(3, 3, &mut rng);
        let wm = gaussian_matrix(3, 3, &mut rng);
        let m = ToyModel::new(
            vec![Layer {
                weights: vec![
                    WeightMatrix { w: wa.clone(), layer: 0, name: "attn".into() },
                    WeightMatrix { w: wm.clone(), layer: 0, name: "mlp".into() },
                ],
            }],
            Activation::Tanh,
        )
        .unwrap();
        let x = gaussian_matrix(5, 3, &mut rng);
        let t = gaussian_matrix(5, 3, &mut rng);
        let g = gradients(&m, &x, &t).unwrap();
        let expected = g.grads[0].frobenius_norm() / wa.frobenius_norm()
            + g.grads[1].frobenius_norm() / wm.frobenius_norm();
        let s = fisher_sensitivity(&m, &x, &t, 5).unwrap();
        assert!((s[0] - expected).abs() <= 1e-10 * expected);
    }

    #[test]
    fn combine_degenerate_exponents() {
        let fisher = [0.3, 0.9, 0.1, 0.5];
        let ranks = [4.0, 2.0, 7.0, 1.0];
        let argsort = |v: &[f64]| {
            let mut o: Vec<usize> = (0..v.len()).collect();
            o.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            o
        };
        let s = combine_scores(&fisher, &ranks, 1.0, 0.95, EnergyMode::Squares).unwrap();
        assert_eq!(argsort(&s.combined), argsort(&fisher));
        let s = combine_scores(&fisher, &ranks, 0.0, 0.95, EnergyMode::Squares).unwrap();
        assert_eq!(argsort(&s.combined), argsort(&ranks));
    }

    #[test]
    fn combine_by_hand() {
        // normalized fisher [ε, 1+ε], normalized ranks [1+ε, ε]
        let s = combine_scores(&[1.0, 2.0], &[4.0, 1.0], 0.25, 0.95, EnergyMode::Values).unwrap();
        let e = NORMALIZATION_EPS;
        let q0 = e.powf(0.25) * (1.0 + e).powf(0.75);
        let q1 = (1.0 + e).powf(0.25) * e.powf(0.75);
        assert!((s.combined[0] - q0).abs() <= 1e-14 * q0);
        assert!((s.combined[1] - q1).abs() <= 1e-14 * q1);
        assert!(combine_scores(&[1.0], &[1.0, 2.0], 0.25, 0.95, EnergyMode::Values).is_err());
    }

    #[test]
    fn allocate_examples() {
        let plan = allocate_from_importance(&[2.0; 5], 0.3, 0.25).unwrap();
        assert!(plan.preserve.iter().all(|p| (p - 0.7).abs() < 1e-12));
        let plan = allocate_from_importance(&[3.0, 1.0], 0.3, 0.25).unwrap();
        assert!((plan.preserve[0] - 1.0).abs() < 1e-12);
        assert!((plan.preserve[1] - 0.4).abs() < 1e-12);
        assert!(matches!(
            allocate_from_importance(&[3.0, 1.0], 0.3, 0.8),
            Err(Error::Infeasible(_))
        ));
    }
}
