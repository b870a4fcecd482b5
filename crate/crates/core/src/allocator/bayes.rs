//! Budget-constrained Bayesian optimization of per-layer preservation ratios.
//!
//! Candidates live in the box `[lo, hi]^L` and are projected onto the
//! hyperplane `mean(p) = 1 − k` before evaluation. The surrogate is a
//! Gaussian process with a squared-exponential kernel over projected points;
//! the next trial maximizes expected improvement over random multi-starts
//! refined by jittered local moves. Trial 1 is always the uniform plan.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{check_k, water_fill, CompressionPlan, Redistribution};
use crate::compressor::PreparedModel;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, seeded_rng, solve_lower, solve_upper_t, Matrix, SeededRng};
use crate::model::{cosine_similarity, Network, ToyModel};
use crate::whitening::WhiteningTransform;

pub const DEFAULT_BUDGET: usize = 64;
/// Random starts for expected-improvement maximization.
pub const EI_STARTS: usize = 256;
const LOCAL_SEEDS: usize = 4;
const LOCAL_STEPS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Surrogate {
    #[default]
    GpEi,
    RandomSearch,
}

impl std::str::FromStr for Surrogate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp-ei" => Ok(Surrogate::GpEi),
            "random-search" => Ok(Surrogate::RandomSearch),
            other => Err(Error::Config(format!("unknown surrogate {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    /// Number of objective evaluations.
    pub budget: usize,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
    pub surrogate: Surrogate,
    /// Standard deviation of local EI refinement moves, as a fraction of the domain width.
    pub jitter: f64,
    /// Kernel length scale as a fraction of the domain width.
    pub length_scale: f64,
    pub noise: f64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            lo: 0.25,
            hi: 1.0,
            seed: 0,
            surrogate: Surrogate::GpEi,
            jitter: 0.05,
            length_scale: 0.2,
            noise: 1e-6,
        }
    }
}

impl BoConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::Config(format!(
                "BO domain needs lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.budget == 0 {
            return Err(Error::Config("BO budget must be at least 1".into()));
        }
        if !(self.length_scale > 0.0) || !(self.noise >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config("BO kernel settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub ratios: Vec<f64>,
    /// `-inf` for a failed evaluation; serialized as `null`.
    #[serde(with = "finite_or_null")]
    pub objective: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub entries: Vec<TraceEntry>,
    pub best_plan: Vec<f64>,
    pub best_value: f64,
}

impl BoTrace {
    /// Best objective seen after each iteration.
    pub fn running_best(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.entries
            .iter()
            .map(|e| {
                best = best.max(e.objective);
                best
            })
            .collect()
    }

    /// One JSON object per candidate.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<TraceEntry>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Score of a candidate plan; higher is better.
pub trait Objective {
    fn evaluate(&self, preserve: &[f64]) -> Result<f64>;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> Result<f64>,
{
    fn evaluate(&self, preserve: &[f64]) -> Result<f64> {
        self(preserve)
    }
}

/// Cosine similarity between original and compressed outputs on calibration input.
pub struct OutputSimilarity<'a> {
    prepared: PreparedModel,
    reference: Matrix,
    x: &'a Matrix,
}

impl<'a> OutputSimilarity<'a> {
    pub fn new(model: &ToyModel, x: &'a Matrix, transforms: &[WhiteningTransform]) -> Result<Self> {
        Ok(Self {
            prepared: PreparedModel::new(model, transforms)?,
            reference: model.output(x)?,
            x,
        })
    }

    pub fn from_prepared(prepared: PreparedModel, reference: Matrix, x: &'a Matrix) -> Self {
        Self {
            prepared,
            reference,
            x,
        }
    }
}

impl Objective for OutputSimilarity<'_> {
    fn evaluate(&self, preserve: &[f64]) -> Result<f64> {
        let (compressed, _) = self.prepared.compress(preserve)?;
        cosine_similarity(&self.reference, &compressed.output(self.x)?)
    }
}

/// Shifts `raw` to mean `1 − k`, then clamps to `[lo, hi]` and redistributes
/// among unclamped coordinates.
pub fn project_to_budget(raw: &[f64], k: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    water_fill(raw, 1.0 - k, lo, hi, Redistribution::Additive)
}

/// Searches preservation ratios for `model` maximizing output cosine similarity.
pub fn optimize(
    model: &ToyModel,
    x: &Matrix,
    transforms: &[WhiteningTransform],
    k: f64,
    cfg: &BoConfig,
) -> Result<(CompressionPlan, BoTrace)> {
    let objective = OutputSimilarity::new(model, x, transforms)?;
    optimize_with(&objective, model.layer_count(), k, cfg)
}

/// Same search against an arbitrary objective over `layers` ratios.
pub fn optimize_with(
    objective: &dyn Objective,
    layers: usize,
    k: f64,
    cfg: &BoConfig,
) -> Result<(CompressionPlan, BoTrace)> {
    cfg.validate()?;
    check_k(k)?;
    if layers == 0 {
        return Err(Error::Contract("cannot optimize over zero layers".into()));
    }
    let target = 1.0 - k;
    if target < cfg.lo || target > cfg.hi {
        return Err(Error::Infeasible(format!(
            "mean preservation {target} lies outside the BO domain [{}, {}]",
            cfg.lo, cfg.hi
        )));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut entries: Vec<TraceEntry> = Vec::with_capacity(cfg.budget);
    // a single layer is fully determined by the constraint
    let budget = if layers == 1 { 1 } else { cfg.budget };

    for iteration in 0..budget {
        let candidate = if iteration == 0 {
            vec![target; layers]
        } else {
            match cfg.surrogate {
                Surrogate::RandomSearch => random_candidate(layers, k, cfg, &mut rng)?,
                Surrogate::GpEi => propose_ei(&entries, layers, k, cfg, &mut rng)?,
            }
        };
        let objective = match objective.evaluate(&candidate) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        };
        entries.push(TraceEntry {
            iteration,
            ratios: candidate,
            objective,
            timestamp: now_millis(),
        });
    }

    let best = entries
        .iter()
        .enumerate()
        .fold(0usize, |b, (i, e)| if e.objective > entries[b].objective { i } else { b });
    let best_plan = entries[best].ratios.clone();
    let best_value = entries[best].objective;
    Ok((
        CompressionPlan {
            preserve: best_plan.clone(),
            target_k: k,
        },
        BoTrace {
            entries,
            best_plan,
            best_value,
        },
    ))
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn uniform_raw(layers: usize, cfg: &BoConfig, rng: &mut SeededRng) -> Vec<f64> {
    (0..layers).map(|_| rng.random_range(cfg.lo..cfg.hi)).collect()
}

fn random_candidate(layers: usize, k: f64, cfg: &BoConfig, rng: &mut SeededRng) -> Result<Vec<f64>> {
    project_to_budget(&uniform_raw(layers, cfg, rng), k, cfg.lo, cfg.hi)
}

fn propose_ei(
    history: &[TraceEntry],
    layers: usize,
    k: f64,
    cfg: &BoConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let observed: Vec<&TraceEntry> = history.iter().filter(|e| e.objective.is_finite()).collect();
    if observed.len() < 2 {
        return random_candidate(layers, k, cfg, rng);
    }
    let xs: Vec<Vec<f64>> = observed.iter().map(|e| e.ratios.clone()).collect();
    let ys: Vec<f64> = observed.iter().map(|e| e.objective).collect();
    let width = cfg.hi - cfg.lo;
    let gp = GaussianProcess::fit(xs, &ys, cfg.length_scale * width, cfg.noise)?;

    let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(EI_STARTS);
    for _ in 0..EI_STARTS {
        let c = random_candidate(layers, k, cfg, rng)?;
        scored.push((gp.expected_improvement(&c), c));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(LOCAL_SEEDS);

    let mut best = scored[0].clone();
    for (mut ei, mut point) in scored {
        for _ in 0..LOCAL_STEPS {
            let moved: Vec<f64> = point
                .iter()
                .map(|&p| {
                    let step: f64 = StandardNormal.sample(rng);
                    (p + cfg.jitter * width * step).clamp(cfg.lo, cfg.hi)
                })
                .collect();
            let moved = project_to_budget(&moved, k, cfg.lo, cfg.hi)?;
            let score = gp.expected_improvement(&moved);
            if score > ei {
                ei = score;
                point = moved;
            }
        }
        if ei > best.0 {
            best = (ei, point);
        }
    }

    let duplicate = history
        .iter()
        .any(|e| e.ratios.iter().zip(&best.1).all(|(a, b)| (a - b).abs() < 1e-12));
    if duplicate {
        return random_candidate(layers, k, cfg, rng);
    }
    Ok(best.1)
}

/// Zero-mean GP on standardized observations with a squared-exponential kernel.
struct GaussianProcess {
    xs: Vec<Vec<f64>>,
    chol: Matrix,
    alpha: Vec<f64>,
    best: f64,
    length_scale: f64,
}

impl GaussianProcess {
    fn fit(xs: Vec<Vec<f64>>, ys: &[f64], length_scale: f64, noise: f64) -> Result<Self> {
        let n = ys.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let z: Vec<f64> = ys.iter().map(|y| (y - mean) / std).collect();

        let mut jitter = noise.max(1e-10);
        let chol = loop {
            let kmat = Matrix::from_fn(n, n, |i, j| {
                let base = se_kernel(&xs[i], &xs[j], length_scale);
                if i == j {
                    base + jitter
                } else {
                    base
                }
            });
            match cholesky(&kmat) {
                Ok(l) => break l,
                Err(_) if jitter < 1e-2 => jitter *= 10.0,
                Err(e) => return Err(e),
            }
        };
        let alpha = solve_upper_t(&chol, &solve_lower(&chol, &z));
        let best = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            xs,
            chol,
            alpha,
            best,
            length_scale,
        })
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let kstar: Vec<f64> = self
            .xs
            .iter()
            .map(|xi| se_kernel(xi, x, self.length_scale))
            .collect();
        let mu: f64 = kstar.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = solve_lower(&self.chol, &kstar);
        let var = (1.0 - v.iter().map(|a| a * a).sum::<f64>()).max(0.0);
        (mu, var.sqrt())
    }

    fn expected_improvement(&self, x: &[f64]) -> f64 {
        let (mu, sigma) = self.predict(x);
        let gain = mu - self.best;
        if sigma < 1e-12 {
            return gain.max(0.0);
        }
        let z = gain / sigma;
        let normal = Normal::standard();
        gain * normal.cdf(z) + sigma * normal.pdf(z)
    }
}

fn se_kernel(a: &[f64], b: &[f64], length_scale: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2 / (length_scale * length_scale)).exp()
}

/// Appends trace entries as JSON lines to an open writer.
pub fn write_trace<W: Write>(trace: &BoTrace, mut out: W) -> Result<()> {
    out.write_all(trace.to_jsonl()?.as_bytes())
        .map_err(|e| Error::io("<trace writer>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let p = project_to_budget(&[0.6, 0.8, 0.7], 0.3, 0.25, 1.0).unwrap();
        assert_eq!(p, vec![0.6, 0.8, 0.7]);
        let p = project_to_budget(&[1.0, 0.3], 0.3, 0.25, 1.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12);
        assert!(matches!(project_to_budget(&[0.5, 0.5], 0.9, 0.25, 1.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn single_layer_is_fixed_by_constraint() {
        let calls = std::cell::Cell::new(0);
        let obj = |p: &[f64]| -> Result<f64> {
            calls.set(calls.get() + 1);
            Ok(p[0])
        };
        let (plan, trace) = optimize_with(&obj, 1, 0.3, &BoConfig::default()).unwrap();
        assert_eq!(calls.get(), 1);
        assert_eq!(trace.entries.len(), 1);
        assert!((plan.preserve[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn failed_trials_score_negative_infinity() {
        let obj = |p: &[f64]| -> Result<f64> {
            if p[0] > 0.9 {
                Err(Error::DegenerateSpectrum("test".into()))
            } else {
                Ok(-(p[0] - 0.5).powi(2))
            }
        };
        let cfg = BoConfig { budget: 20, seed: 3, ..BoConfig::default() };
        let (_, trace) = optimize_with(&obj, 3, 0.3, &cfg).unwrap();
        for e in &trace.entries {
            if e.ratios[0] > 0.9 {
                assert_eq!(e.objective, f64::NEG_INFINITY);
            }
        }
        assert!(trace.best_value.is_finite());
        let text = trace.to_jsonl().unwrap();
        let back: Vec<TraceEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back.len(), trace.entries.len());
    }

    #[test]
    fn gp_search_improves_on_smooth_objective() {
        let obj = |p: &[f64]| -> Result<f64> {
            Ok(-((p[0] - 0.95).powi(2) + (p[1] - 0.45).powi(2) + (p[2] - 0.7).powi(2)))
        };
        let cfg = BoConfig { budget: 30, seed: 1, ..BoConfig::default() };
        let (plan, trace) = optimize_with(&obj, 3, 0.3, &cfg).unwrap();
        assert!(trace.best_value > trace.entries[0].objective);
        assert!((plan.mean_preserved() - 0.7).abs() < 1e-9);
        assert!(trace.best_value > -0.01, "best {}", trace.best_value);
    }

    #[test]
    fn surrogate_parsing() {
        assert_eq!("gp-ei".parse::<Surrogate>().unwrap(), Surrogate::GpEi);
        assert_eq!("random-search".parse::<Surrogate>().unwrap(), Surrogate::RandomSearch);
        assert!("tpe".parse::<Surrogate>().is_err());
    }
}
