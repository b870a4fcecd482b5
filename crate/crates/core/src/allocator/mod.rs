//! Layer-wise preservation-ratio allocation under a mean budget.

pub mod bayes;
pub mod heuristic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean, pearson};

/// Default lower bound on any layer's preservation ratio.
pub const DEFAULT_P_MIN: f64 = 0.25;
/// Budget tolerance on `mean(preserve)`.
pub const BUDGET_TOL: f64 = 1e-9;

/// Per-layer preservation ratios; layer `l` keeps `preserve[l]` of its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub preserve: Vec<f64>,
    /// Target global compression ratio `k`; `mean(preserve) = 1 − k`.
    pub target_k: f64,
}

impl CompressionPlan {
    pub fn uniform(layers: usize, k: f64) -> Result<Self> {
        check_k(k)?;
        Ok(Self {
            preserve: vec![1.0 - k; layers],
            target_k: k,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.preserve.len()
    }

    /// Per-layer compression ratios `k_l = 1 − p_l`.
    pub fn compression_ratios(&self) -> Vec<f64> {
        self.preserve.iter().map(|p| 1.0 - p).collect()
    }

    pub fn mean_preserved(&self) -> f64 {
        mean(&self.preserve)
    }
}

pub(crate) fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::Contract(format!(
            "compression ratio k must lie in (0, 1), got {k}"
        )));
    }
    Ok(())
}

/// How free coordinates move while the budget is rebalanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Redistribution {
    /// `p_l = clamp(c · raw_l)`; keeps ratios between free layers.
    Proportional,
    /// `p_l = clamp(raw_l + δ)`; keeps differences between free layers.
    Additive,
}

/// Clamp-and-redistribute so every entry lies in `[lo, hi]` and the mean is
/// exactly `target`.
///
/// The result is the unique point `clamp(f(c, raw))` on the monotone path
/// selected by `mode` whose mean equals `target`. The clamped set is found by
/// bisection on `c`, then the free coordinates are solved in closed form.
pub fn water_fill(
    raw: &[f64],
    target: f64,
    lo: f64,
    hi: f64,
    mode: Redistribution,
) -> Result<Vec<f64>> {
    let n = raw.len();
    if n == 0 {
        return Err(Error::Contract("cannot allocate over zero layers".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("raw allocation contains non-finite values".into()));
    }
    if !(lo <= hi) {
        return Err(Error::Infeasible(format!("empty domain [{lo}, {hi}]")));
    }
    if target < lo - BUDGET_TOL || target > hi + BUDGET_TOL {
        return Err(Error::Infeasible(format!(
            "mean preservation {target} lies outside the per-layer domain [{lo}, {hi}]"
        )));
    }
    if mode == Redistribution::Proportional && raw.iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("proportional allocation needs non-negative scores".into()));
    }

    let eval = |c: f64| -> Vec<f64> {
        raw.iter()
            .map(|&r| {
                let v = match mode {
                    Redistribution::Proportional => c * r,
                    Redistribution::Additive => r + c,
                };
                v.clamp(lo, hi)
            })
            .collect()
    };
    let mean_at = |c: f64| mean(&eval(c));

    // bracket [c_lo, c_hi] with mean(c_lo) <= target <= mean(c_hi)
    let (mut c_lo, mut c_hi) = match mode {
        Redistribution::Proportional => {
            let min_pos = raw.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
            if !min_pos.is_finite() {
                // every score is zero: only the all-lo point is reachable
                if (target - lo).abs() <= BUDGET_TOL {
                    return Ok(vec![lo; n]);
                }
                return Err(Error::Infeasible("all layer scores are zero".into()));
            }
            (0.0, hi.max(1e-300) / min_pos)
        }
        Redistribution::Additive => {
            let rmin = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let rmax = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo - rmax, hi - rmin)
        }
    };
    if mean_at(c_hi) < target - BUDGET_TOL {
        return Err(Error::Infeasible(format!(
            "cannot reach mean {target}: some layers have zero score"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (c_lo + c_hi);
        if mid <= c_lo || mid >= c_hi {
            break;
        }
        if mean_at(mid) < target {
            c_lo = mid;
        } else {
            c_hi = mid;
        }
    }
    let c = 0.5 * (c_lo + c_hi);
    let mut p = eval(c);

    // closed-form solve over the free set
    let free: Vec<usize> = (0..n).filter(|&i| p[i] > lo && p[i] < hi).collect();
    if !free.is_empty() {
        let clamped_sum: f64 = (0..n).filter(|i| !free.contains(i)).map(|i| p[i]).sum();
        let remaining = target * n as f64 - clamped_sum;
        match mode {
            Redistribution::Proportional => {
                let raw_sum: f64 = free.iter().map(|&i| raw[i]).sum();
                let c_star = remaining / raw_sum;
                for &i in &free {
                    p[i] = (c_star * raw[i]).clamp(lo, hi);
                }
            }
            Redistribution::Additive => {
                let raw_sum: f64 = free.iter().map(|&i| raw[i]).sum();
                let d_star = (remaining - raw_sum) / free.len() as f64;
                for &i in &free {
                    p[i] = (raw[i] + d_star).clamp(lo, hi);
                }
            }
        }
    }
    let achieved = mean(&p);
    if (achieved - target).abs() > BUDGET_TOL {
        return Err(Error::Infeasible(format!(
            "water-filling reached mean {achieved}, target {target}"
        )));
    }
    Ok(p)
}

/// Pearson correlation between the preservation vectors of two plans.
pub fn compare_allocators(heuristic: &CompressionPlan, bayes: &CompressionPlan) -> Result<f64> {
    pearson(&heuristic.preserve, &bayes.preserve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_trace() {
        // unclamped values are [1.05, 0.35] for Q = [3, 1], k = 0.3
        let p = water_fill(&[3.0, 1.0], 0.7, 0.25, 1.0, Redistribution::Proportional).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn additive_trace() {
        let p = water_fill(&[1.0, 0.3], 0.7, 0.25, 1.0, Redistribution::Additive).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets() {
        assert!(matches!(
            water_fill(&[1.0, 1.0], 0.2, 0.25, 1.0, Redistribution::Proportional),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            water_fill(&[1.0, 0.0], 0.9, 0.0, 1.0, Redistribution::Proportional),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn plan_helpers() {
        let plan = CompressionPlan::uniform(3, 0.3).unwrap();
        assert!((plan.mean_preserved() - 0.7).abs() < 1e-15);
        assert!(plan.compression_ratios().iter().all(|k| (k - 0.3).abs() < 1e-15));
        assert!(CompressionPlan::uniform(3, 1.5).is_err());
        let same = compare_allocators(
            &CompressionPlan { preserve: vec![0.5, 0.9, 0.7], target_k: 0.3 },
            &CompressionPlan { preserve: vec![0.5, 0.9, 0.7], target_k: 0.3 },
        )
        .unwrap();
        assert!((same - 1.0).abs() < 1e-15);
    }
}
