//! End-to-end orchestration behind the CLI: capture, whitening, allocation,
//! compression, evaluation, and report/artifact generation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::bayes::{self, BoConfig, BoTrace};
use crate::allocator::heuristic::{self, EnergyMode, HeuristicConfig, LayerScores};
use crate::allocator::{compare_allocators, CompressionPlan, DEFAULT_P_MIN};
use crate::calibration::{
    capture_activations, decaying_spectrum, generate_synthetic, load_matrix, CalibrationMatrix,
    DEFAULT_CALIBRATION_ROWS,
};
use crate::compressor::{flops_report, rank_from_ratio, FlopsReport, PreparedModel};
use crate::error::{Error, Result};
use crate::io::{encode_dsvd, write_atomic};
use crate::linalg::{gaussian_matrix, seeded_rng, svd, Matrix};
use crate::model::{cosine_output_similarity, CompressedModel, ModelSpec, ToyModel};
use crate::whitening::{
    build_scaling, build_whitening, channel_importance, default_damping, ChannelScaling,
    WhiteningTransform,
};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DIPSVD_SEED";
pub const DEFAULT_AMPLIFY: f64 = 30.0;
pub const DEFAULT_TOP_FRACTION: f64 = 0.03;
/// Relative noise of the sampled targets used for Fisher sensitivity.
pub const DEFAULT_FISHER_NOISE: f64 = 0.1;
/// Singular-value decay of default synthetic calibration input.
pub const DEFAULT_CALIBRATION_DECAY: f64 = 3.0;
const CALIBRATION_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WhiteningMode {
    /// `D` amplifies important channels before whitening.
    #[default]
    ChannelWeighted,
    /// `D = I`.
    Plain,
    /// No whitening: plain truncated SVD of the weight.
    None,
}

impl std::str::FromStr for WhiteningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel-weighted" => Ok(WhiteningMode::ChannelWeighted),
            "plain" => Ok(WhiteningMode::Plain),
            "none" => Ok(WhiteningMode::None),
            other => Err(Error::Config(format!("unknown whitening mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AllocatorKind {
    #[default]
    Heuristic,
    Bayes,
    Uniform,
}

impl std::str::FromStr for AllocatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(AllocatorKind::Heuristic),
            "bayes" => Ok(AllocatorKind::Bayes),
            "uniform" => Ok(AllocatorKind::Uniform),
            other => Err(Error::Config(format!("unknown allocator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Compress,
    Allocate,
    VerifyLoss,
    Report,
}

/// Every knob of a run. `model = None` uses a default 4-layer random model;
/// `calibration = None` generates seeded synthetic input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub model: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub calibration_rows: usize,
    pub k: f64,
    pub amplify: f64,
    pub top_fraction: f64,
    pub beta: f64,
    pub tau: f64,
    pub p_min: f64,
    /// Whitening damping; `None` uses `1e-6 · trace(G) / n`.
    pub lambda: Option<f64>,
    pub energy_mode: EnergyMode,
    pub allocator: AllocatorKind,
    pub whitening: WhiteningMode,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub bo_budget: usize,
    pub bo_seed: Option<u64>,
    pub surrogate: bayes::Surrogate,
    pub fisher_noise: f64,
    /// Instances for `verify-loss`.
    pub instances: usize,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            model: None,
            calibration: None,
            calibration_rows: DEFAULT_CALIBRATION_ROWS,
            k: 0.3,
            amplify: DEFAULT_AMPLIFY,
            top_fraction: DEFAULT_TOP_FRACTION,
            beta: heuristic::DEFAULT_BETA,
            tau: heuristic::DEFAULT_TAU,
            p_min: DEFAULT_P_MIN,
            lambda: None,
            energy_mode: EnergyMode::default(),
            allocator: AllocatorKind::default(),
            whitening: WhiteningMode::default(),
            seed: 0,
            output: None,
            bo_budget: bayes::DEFAULT_BUDGET,
            bo_seed: None,
            surrogate: bayes::Surrogate::default(),
            fisher_noise: DEFAULT_FISHER_NOISE,
            instances: 100,
        }
    }

    /// Replaces the seed with `DIPSVD_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.k > 0.0 && self.k < 1.0) {
            return bad(format!("k must lie in (0, 1), got {}", self.k));
        }
        if !(self.amplify >= 1.0) || !self.amplify.is_finite() {
            return bad(format!("amplify must be >= 1, got {}", self.amplify));
        }
        if !(0.0..=1.0).contains(&self.top_fraction) {
            return bad(format!("top fraction must lie in [0, 1], got {}", self.top_fraction));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.p_min >= 0.0 && self.p_min <= 1.0) {
            return bad(format!("p_min must lie in [0, 1], got {}", self.p_min));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return bad(format!("lambda must be >= 0, got {l}"));
            }
        }
        if self.calibration_rows == 0 {
            return bad("calibration needs at least one row".into());
        }
        if self.bo_budget == 0 {
            return bad("BO budget must be at least 1".into());
        }
        if !(self.fisher_noise > 0.0) {
            return bad(format!("fisher noise must be positive, got {}", self.fisher_noise));
        }
        Ok(())
    }

    pub fn heuristic(&self) -> HeuristicConfig {
        HeuristicConfig {
            beta: self.beta,
            tau: self.tau,
            energy_mode: self.energy_mode,
            p_min: self.p_min,
            ..HeuristicConfig::default()
        }
    }

    pub fn bo(&self) -> BoConfig {
        BoConfig {
            budget: self.bo_budget,
            lo: self.p_min,
            hi: 1.0,
            seed: self.bo_seed.unwrap_or(self.seed),
            surrogate: self.surrogate,
            ..BoConfig::default()
        }
    }

    pub fn load_model(&self) -> Result<ToyModel> {
        match &self.model {
            Some(path) => ModelSpec::load(path)?.build(),
            None => ModelSpec::new(4, 16, 16, self.seed).build(),
        }
    }

    pub fn load_calibration(&self, model: &ToyModel) -> Result<CalibrationMatrix> {
        let calib = match &self.calibration {
            Some(path) => load_matrix(path)?,
            None => default_calibration(model.input_dim(), self.calibration_rows, self.seed)?,
        };
        if calib.channels() != model.input_dim() {
            return Err(Error::Config(format!(
                "calibration has {} channels, model expects {}",
                calib.channels(),
                model.input_dim()
            )));
        }
        Ok(calib)
    }
}

/// Seeded synthetic input with a decaying spectrum and a little isotropic noise.
pub fn default_calibration(channels: usize, rows: usize, seed: u64) -> Result<CalibrationMatrix> {
    let mut spectrum = decaying_spectrum(channels, DEFAULT_CALIBRATION_DECAY);
    let scale = (rows as f64).sqrt();
    spectrum.iter_mut().for_each(|s| *s *= scale);
    spectrum.iter_mut().skip(rows).for_each(|s| *s = 0.0);
    generate_synthetic(rows, channels, &spectrum, CALIBRATION_NOISE, seed ^ 0x5eed_ca11)
}

/// Whitening per weight input, forward order.
pub fn build_transforms(
    activations: &[CalibrationMatrix],
    mode: WhiteningMode,
    amplify: f64,
    top_fraction: f64,
    lambda: Option<f64>,
) -> Result<Vec<WhiteningTransform>> {
    activations
        .iter()
        .map(|act| {
            let scaling = match mode {
                WhiteningMode::None => return Ok(WhiteningTransform::identity(act.channels())),
                WhiteningMode::Plain => ChannelScaling::identity(act.channels()),
                WhiteningMode::ChannelWeighted => {
                    build_scaling(&channel_importance(&act.x), amplify, top_fraction)?
                }
            };
            let lambda = match lambda {
                Some(l) => l,
                None => default_damping(&scaling.apply(&act.x)?.gram()),
            };
            build_whitening(&act.x, &scaling, lambda)
        })
        .collect()
}

/// Scaling that defines the common evaluation yardstick `X̃ = X·D`.
pub fn evaluation_scalings(
    activations: &[CalibrationMatrix],
    amplify: f64,
    top_fraction: f64,
) -> Result<Vec<ChannelScaling>> {
    activations
        .iter()
        .map(|a| build_scaling(&channel_importance(&a.x), amplify, top_fraction))
        .collect()
}

/// Output of the allocation stage.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub plan: CompressionPlan,
    pub scores: Option<LayerScores>,
    pub trace: Option<BoTrace>,
    /// Heuristic-vs-BO Pearson correlation, when both plans exist.
    pub correlation: Option<f64>,
    /// Present when the correlation could not be computed.
    pub correlation_note: Option<String>,
}

pub fn allocate(
    model: &ToyModel,
    x: &Matrix,
    transforms: &[WhiteningTransform],
    cfg: &RunConfig,
) -> Result<Allocation> {
    let heuristic_scores = || -> Result<LayerScores> {
        let target = heuristic::sampled_target(model, x, cfg.fisher_noise, cfg.seed)?;
        heuristic::score_layers(model, x, &target, &cfg.heuristic())
    };
    match cfg.allocator {
        AllocatorKind::Uniform => Ok(Allocation {
            plan: CompressionPlan::uniform(model.layer_count(), cfg.k)?,
            scores: None,
            trace: None,
            correlation: None,
            correlation_note: None,
        }),
        AllocatorKind::Heuristic => {
            let scores = heuristic_scores()?;
            let plan = heuristic::allocate(&scores, cfg.k, cfg.p_min)?;
            Ok(Allocation {
                plan,
                scores: Some(scores),
                trace: None,
                correlation: None,
                correlation_note: None,
            })
        }
        AllocatorKind::Bayes => {
            let (plan, trace) = bayes::optimize(model, x, transforms, cfg.k, &cfg.bo())?;
            let scores = heuristic_scores()?;
            let h_plan = heuristic::allocate(&scores, cfg.k, cfg.p_min)?;
            let (correlation, correlation_note) = match compare_allocators(&h_plan, &plan) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Ok(Allocation {
                plan,
                scores: Some(scores),
                trace: Some(trace),
                correlation,
                correlation_note,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub layer: usize,
    pub name: String,
    pub d_out: usize,
    pub n: usize,
    pub original_params: usize,
    pub rank: usize,
    pub compressed_params: usize,
    /// Root-sum-square of dropped singular values of `W·S`.
    pub predicted_loss: f64,
    /// `‖X·D (W − W_u W_v)ᵀ‖_F` with this run's scaling `D`.
    pub observed_loss: f64,
    /// Same norm on the channel-weighted evaluation input, shared by all modes.
    pub eval_loss: f64,
    /// Same norm on the raw captured input.
    pub raw_loss: f64,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

/// Non-deterministic run metadata, kept in one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub stages: Vec<StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub k: f64,
    pub allocator: AllocatorKind,
    pub whitening: WhiteningMode,
    pub seed: u64,
    pub weights: Vec<WeightRecord>,
    pub plan: CompressionPlan,
    pub scores: Option<LayerScores>,
    pub original_params: usize,
    pub compressed_params: usize,
    /// `compressed_params / original_params`.
    pub parameter_ratio: f64,
    pub flops: FlopsReport,
    pub cosine_similarity: f64,
    pub total_observed_loss: f64,
    pub total_eval_loss: f64,
    pub correlation: Option<f64>,
    pub correlation_note: Option<String>,
    pub run: RunInfo,
}

impl CompressionReport {
    /// Slack on the parameter ratio from rounding ranks down, at most one rank unit per weight.
    pub fn rounding_slack(&self) -> f64 {
        let unit: usize = self.weights.iter().map(|w| w.d_out + w.n).sum();
        unit as f64 / self.original_params as f64
    }
}

/// Everything a compression run produces, before any file is written.
#[derive(Debug, Clone)]
pub struct CompressionRun {
    pub model: ToyModel,
    pub calibration: CalibrationMatrix,
    pub activations: Vec<CalibrationMatrix>,
    pub transforms: Vec<WhiteningTransform>,
    pub allocation: Allocation,
    pub compressed: CompressedModel,
    pub report: CompressionReport,
}

struct Stopwatch {
    stages: Vec<StageTiming>,
}

impl Stopwatch {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
        out
    }
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// `‖X·D·(W − W_u W_v)ᵀ‖_F` for every weight.
fn weight_losses(
    model: &ToyModel,
    compressed: &CompressedModel,
    activations: &[CalibrationMatrix],
    scalings: &[&ChannelScaling],
) -> Result<Vec<f64>> {
    model
        .weights()
        .zip(compressed.weights())
        .zip(activations.iter().zip(scalings))
        .map(|((w, c), (act, scaling))| {
            let delta = w.w.sub(&c.factors.product())?;
            Ok(scaling.apply(&act.x)?.matmul_t(&delta)?.frobenius_norm())
        })
        .collect()
}

/// Runs the full pipeline in memory.
pub fn run_compression(cfg: &RunConfig) -> Result<CompressionRun> {
    cfg.validate()?;
    let mut clock = Stopwatch { stages: Vec::new() };
    let model = clock.run("model", || cfg.load_model())?;
    let calibration = clock.run("calibration", || cfg.load_calibration(&model))?;
    let activations = clock.run("capture", || capture_activations(&model, &calibration))?;
    let transforms = clock.run("whitening", || {
        build_transforms(&activations, cfg.whitening, cfg.amplify, cfg.top_fraction, cfg.lambda)
    })?;
    let allocation = clock.run("allocation", || allocate(&model, &calibration.x, &transforms, cfg))?;
    let (compressed, losses) = clock.run("compression", || {
        PreparedModel::new(&model, &transforms)?.compress(&allocation.plan.preserve)
    })?;
    let report = clock.run("evaluation", || {
        let eval = evaluation_scalings(&activations, cfg.amplify, cfg.top_fraction)?;
        let own: Vec<&ChannelScaling> = transforms.iter().map(|t| &t.scaling).collect();
        let observed = weight_losses(&model, &compressed, &activations, &own)?;
        let eval_loss = weight_losses(&model, &compressed, &activations, &eval.iter().collect::<Vec<_>>())?;
        let identity: Vec<ChannelScaling> =
            activations.iter().map(|a| ChannelScaling::identity(a.channels())).collect();
        let raw = weight_losses(&model, &compressed, &activations, &identity.iter().collect::<Vec<_>>())?;

        let weights: Vec<WeightRecord> = model
            .weights()
            .zip(compressed.weights())
            .enumerate()
            .map(|(i, (w, c))| {
                let (d_out, n) = w.w.shape();
                WeightRecord {
                    layer: w.layer,
                    name: w.name.clone(),
                    d_out,
                    n,
                    original_params: d_out * n,
                    rank: c.factors.rank,
                    compressed_params: c.factors.parameter_count(),
                    predicted_loss: losses[i].predicted,
                    observed_loss: observed[i],
                    eval_loss: eval_loss[i],
                    raw_loss: raw[i],
                    damping: transforms[i].damping,
                }
            })
            .collect();
        let original_params = model.parameter_count();
        let compressed_params = compressed.parameter_count();
        Ok(CompressionReport {
            k: cfg.k,
            allocator: cfg.allocator,
            whitening: cfg.whitening,
            seed: cfg.seed,
            total_observed_loss: observed.iter().sum(),
            total_eval_loss: eval_loss.iter().sum(),
            weights,
            plan: allocation.plan.clone(),
            scores: allocation.scores.clone(),
            original_params,
            compressed_params,
            parameter_ratio: compressed_params as f64 / original_params as f64,
            flops: flops_report(&model, &compressed, calibration.tokens())?,
            cosine_similarity: cosine_output_similarity(&model, &compressed, &calibration.x)?,
            correlation: allocation.correlation,
            correlation_note: allocation.correlation_note.clone(),
            run: RunInfo {
                timestamp: 0,
                stages: Vec::new(),
            },
        })
    })?;
    let mut report = report;
    report.run = RunInfo {
        timestamp: now_millis(),
        stages: clock.stages,
    };
    Ok(CompressionRun {
        model,
        calibration,
        activations,
        transforms,
        allocation,
        compressed,
        report,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: usize,
    pub name: String,
    pub rank: usize,
    pub d_out: usize,
    pub n: usize,
    pub w_u: String,
    pub w_v: String,
    pub whitening: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub activation: crate::model::Activation,
    pub plan: CompressionPlan,
    pub weights: Vec<ManifestEntry>,
}

/// Serializes every artifact of a run into `(relative path, bytes)` pairs.
pub fn artifacts(run: &CompressionRun) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for (c, t) in run.compressed.weights().zip(&run.transforms) {
        let stem = format!("L{}_{}", c.layer, c.name);
        let w_u = format!("factors/{stem}_u.dsvd");
        let w_v = format!("factors/{stem}_v.dsvd");
        let whitening = format!("whitening/{stem}_s.dsvd");
        files.push((PathBuf::from(&w_u), encode_dsvd(&c.factors.w_u)?));
        files.push((PathBuf::from(&w_v), encode_dsvd(&c.factors.w_v)?));
        files.push((PathBuf::from(&whitening), encode_dsvd(&t.s)?));
        entries.push(ManifestEntry {
            layer: c.layer,
            name: c.name.clone(),
            rank: c.factors.rank,
            d_out: c.factors.w_u.rows(),
            n: c.factors.w_v.cols(),
            w_u,
            w_v,
            whitening,
        });
    }
    let manifest = Manifest {
        activation: run.compressed.activation,
        plan: run.allocation.plan.clone(),
        weights: entries,
    };
    files.push(("manifest.json".into(), serde_json::to_vec_pretty(&manifest)?));
    files.push(("plan.json".into(), serde_json::to_vec_pretty(&run.allocation.plan)?));
    files.push(("report.json".into(), serde_json::to_vec_pretty(&run.report)?));
    files.push(("report.txt".into(), render_report(&run.report).into_bytes()));
    if let Some(trace) = &run.allocation.trace {
        files.push(("bo_trace.jsonl".into(), trace.to_jsonl()?.into_bytes()));
    }
    Ok(files)
}

/// Writes each file atomically under `dir`. Called only after all computation succeeded.
pub fn write_artifacts(dir: &Path, files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (rel, bytes) in files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_atomic(&path, bytes)?;
    }
    Ok(())
}

/// `compress`: full pipeline, then artifacts under `cfg.output` if set.
pub fn cmd_compress(cfg: &RunConfig) -> Result<CompressionReport> {
    let run = run_compression(cfg)?;
    if let Some(dir) = &cfg.output {
        let files = artifacts(&run).map_err(|e| e.in_stage("report"))?;
        write_artifacts(dir, &files).map_err(|e| e.in_stage("write"))?;
    }
    Ok(run.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationOutput {
    pub plan: CompressionPlan,
    pub scores: Option<LayerScores>,
    pub correlation: Option<f64>,
    pub correlation_note: Option<String>,
}

/// `allocate`: plan plus per-layer scores, without compressing.
pub fn cmd_allocate(cfg: &RunConfig) -> Result<(AllocationOutput, Option<BoTrace>)> {
    cfg.validate()?;
    let model = cfg.load_model().map_err(|e| e.in_stage("model"))?;
    let calibration = cfg.load_calibration(&model).map_err(|e| e.in_stage("calibration"))?;
    let transforms = capture_activations(&model, &calibration)
        .and_then(|acts| build_transforms(&acts, cfg.whitening, cfg.amplify, cfg.top_fraction, cfg.lambda))
        .map_err(|e| e.in_stage("whitening"))?;
    let alloc = allocate(&model, &calibration.x, &transforms, cfg).map_err(|e| e.in_stage("allocation"))?;
    let out = AllocationOutput {
        plan: alloc.plan,
        scores: alloc.scores,
        correlation: alloc.correlation,
        correlation_note: alloc.correlation_note,
    };
    if let Some(dir) = &cfg.output {
        let mut files = vec![
            (PathBuf::from("plan.json"), serde_json::to_vec_pretty(&out.plan)?),
            (PathBuf::from("allocation.json"), serde_json::to_vec_pretty(&out)?),
            (PathBuf::from("allocation.txt"), render_allocation(&out).into_bytes()),
        ];
        if let Some(trace) = &alloc.trace {
            files.push(("bo_trace.jsonl".into(), trace.to_jsonl()?.into_bytes()));
        }
        write_artifacts(dir, &files).map_err(|e| e.in_stage("write"))?;
    }
    Ok((out, alloc.trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub instances: usize,
    pub lambda: f64,
    /// Loss identity is exact only without damping; damped runs are reported, not judged.
    pub damped: bool,
    pub max_rel_dev_single: f64,
    pub max_rel_dev_subset: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Instances whose whitening failed (e.g. singular Gram at `λ = 0`).
    pub singular: Vec<String>,
    /// Outcome of the built-in rank-deficient probe.
    pub rank_deficient_probe: String,
}

pub const VERIFY_TOLERANCE: f64 = 1e-6;

/// `verify-loss`: observed vs predicted truncation loss on random full-rank instances.
pub fn cmd_verify_loss(cfg: &RunConfig) -> VerifyRecord {
    let lambda = cfg.lambda.unwrap_or(0.0);
    let mut rng = seeded_rng(cfg.seed);
    let mut max_single: f64 = 0.0;
    let mut max_subset: f64 = 0.0;
    let mut singular = Vec::new();
    for i in 0..cfg.instances {
        let d_out = rng.random_range(4..=32);
        let n = rng.random_range(4..=32);
        let m = 2 * n + rng.random_range(0..=n);
        let w = gaussian_matrix(d_out, n, &mut rng);
        let x = gaussian_matrix(m, n, &mut rng);
        let a = rng.random_range(1.0..30.0);
        let p = rng.random_range(0.0..0.5);
        match verify_instance(&w, &x, a, p, lambda, &mut rng) {
            Ok((single, subset)) => {
                max_single = max_single.max(single);
                max_subset = max_subset.max(subset);
            }
            Err(e) => singular.push(format!("instance {i}: {e}")),
        }
    }
    let rank_deficient_probe = {
        let x = gaussian_matrix(3, 6, &mut rng);
        match build_whitening(&x, &ChannelScaling::identity(6), lambda) {
            Ok(_) => format!("rank-deficient Gram whitened with lambda {lambda:e}"),
            Err(e) => e.to_string(),
        }
    };
    let damped = lambda > 0.0;
    VerifyRecord {
        instances: cfg.instances,
        lambda,
        damped,
        max_rel_dev_single: max_single,
        max_rel_dev_subset: max_subset,
        tolerance: VERIFY_TOLERANCE,
        passed: damped
            || (singular.is_empty() && max_single < VERIFY_TOLERANCE && max_subset < VERIFY_TOLERANCE),
        singular,
        rank_deficient_probe,
    }
}

fn verify_instance(
    w: &Matrix,
    x: &Matrix,
    a: f64,
    p: f64,
    lambda: f64,
    rng: &mut crate::linalg::SeededRng,
) -> Result<(f64, f64)> {
    let scaling = build_scaling(&channel_importance(x), a, p)?;
    let wt = build_whitening(x, &scaling, lambda)?;
    let ws = svd(&w.matmul(&wt.s)?)?;
    let xd = scaling.apply(x)?;
    let r = ws.sigma.len();
    let loss_dropping = |dropped: &[usize]| -> Result<f64> {
        let mut sigma = ws.sigma.clone();
        for &i in dropped {
            sigma[i] = 0.0;
        }
        let approx = ws.u.scale_columns(&sigma)?.matmul(&ws.vt)?.matmul(&wt.s_inv)?;
        Ok(xd.matmul_t(&w.sub(&approx)?)?.frobenius_norm())
    };
    let mut single: f64 = 0.0;
    for i in 0..r {
        if ws.sigma[i] <= 0.0 {
            continue;
        }
        let got = loss_dropping(&[i])?;
        single = single.max((got - ws.sigma[i]).abs() / ws.sigma[i]);
    }
    let mut subset: f64 = 0.0;
    for _ in 0..3 {
        let dropped: Vec<usize> = (0..r).filter(|_| rng.random_bool(0.5)).collect();
        let want = dropped.iter().map(|&i| ws.sigma[i] * ws.sigma[i]).sum::<f64>().sqrt();
        if want <= 0.0 {
            continue;
        }
        let got = loss_dropping(&dropped)?;
        subset = subset.max((got - want).abs() / want);
    }
    Ok((single, subset))
}

/// `report`: re-renders a saved `report.json`.
pub fn cmd_report(path: &Path) -> Result<String> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let report: CompressionReport = serde_json::from_str(&text)?;
    Ok(render_report(&report))
}

/// Aligned plain-text summary of a report.
pub fn render_report(r: &CompressionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "k = {}  allocator = {:?}  whitening = {:?}  seed = {}",
        r.k, r.allocator, r.whitening, r.seed
    );
    let _ = writeln!(
        s,
        "{:>5} {:<6} {:>9} {:>8} {:>6} {:>8} {:>13} {:>13} {:>13}",
        "layer", "weight", "shape", "params", "rank", "kept", "predicted", "observed", "eval"
    );
    for w in &r.weights {
        let _ = writeln!(
            s,
            "{:>5} {:<6} {:>9} {:>8} {:>6} {:>8} {:>13.6e} {:>13.6e} {:>13.6e}",
            w.layer,
            w.name,
            format!("{}x{}", w.d_out, w.n),
            w.original_params,
            w.rank,
            w.compressed_params,
            w.predicted_loss,
            w.observed_loss,
            w.eval_loss
        );
    }
    let _ = writeln!(
        s,
        "preserve: [{}]",
        r.plan.preserve.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(", ")
    );
    let _ = writeln!(
        s,
        "parameters: {} -> {} (ratio {:.4})",
        r.original_params, r.compressed_params, r.parameter_ratio
    );
    let _ = writeln!(s, "FLOPs reduction: {:.2}%", 100.0 * r.flops.reduction_ratio);
    let _ = writeln!(s, "output cosine similarity: {:.6}", r.cosine_similarity);
    let _ = writeln!(
        s,
        "total loss: observed {:.6e}, eval {:.6e}",
        r.total_observed_loss, r.total_eval_loss
    );
    match (r.correlation, &r.correlation_note) {
        (Some(c), _) => {
            let _ = writeln!(s, "heuristic vs BO correlation: {c:.4}");
        }
        (None, Some(note)) => {
            let _ = writeln!(s, "heuristic vs BO correlation: n/a ({note})");
        }
        _ => {}
    }
    s
}

pub fn render_allocation(out: &AllocationOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>5} {:>12} {:>12} {:>12} {:>9}", "layer", "fisher", "eff_rank", "combined", "preserve");
    for (l, p) in out.plan.preserve.iter().enumerate() {
        match &out.scores {
            Some(sc) => {
                let _ = writeln!(
                    s,
                    "{:>5} {:>12.6e} {:>12} {:>12.6} {:>9.4}",
                    l, sc.fisher[l], sc.eff_rank[l], sc.combined[l], p
                );
            }
            None => {
                let _ = writeln!(s, "{:>5} {:>12} {:>12} {:>12} {:>9.4}", l, "-", "-", "-", p);
            }
        }
    }
    match (out.correlation, &out.correlation_note) {
        (Some(c), _) => {
            let _ = writeln!(s, "heuristic vs BO correlation: {c:.4}");
        }
        (None, Some(note)) => {
            let _ = writeln!(s, "heuristic vs BO correlation: n/a ({note})");
        }
        _ => {}
    }
    s
}

/// Parameter count the plan would keep, for checking budgets before compression.
pub fn planned_parameters(model: &ToyModel, plan: &CompressionPlan) -> Result<usize> {
    model
        .weights()
        .map(|w| {
            let (d, n) = w.w.shape();
            Ok(rank_from_ratio(d, n, plan.preserve[w.layer])? * (d + n))
        })
        .sum()
}
