//! Experiment configs, the command implementations behind the CLI, and run
//! manifests that make every command replayable.
//!
//! Every command writes its outputs into one directory together with
//! [`RUN_MANIFEST`], which records the full invocation, a hash of it, the
//! code version, the master seed, the wall time and a SHA-256 per output
//! file. [`replay`] re-executes the recorded invocation and compares hashes.
//! Files listed as volatile (wall-clock columns) are not hashed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, read_points_csv, write_csv_table, Dataset, DatasetSpec};
use crate::denoiser::{EpsilonModel, MlpSpec, TimeEmbedding};
use crate::error::{Error, Result};
use crate::eval::{
    energy_distance, energy_test, exposure_bias_deterministic, exposure_bias_stochastic, fit_gaussian_stats,
    frechet_gaussian_distance, knn_precision_recall, prediction_error_stats, write_metric_reports, BiasMode,
    ErrorMode, ErrorStatsConfig, MeasureConfig, MetricReport, NormalityTest,
};
use crate::rng::derive_seed;
use crate::sampling::{sample, write_dump, SamplerConfig, SamplerKind, VarianceChoice};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::{DType, Tensor};
use crate::training::{train, Checkpoint, Mode, TrainConfig, TrainOutputs, LOG_FILE};

pub const RUN_MANIFEST: &str = "run_manifest.toml";
pub const ENV_OUTPUT_DIR: &str = "IPDIFF_OUTPUT_DIR";
pub const ENV_THREADS: &str = "IPDIFF_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    /// Held-out draws that generated samples are scored against.
    pub reference_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 20_000,
            reference_size: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding: TimeEmbedding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = MlpSpec::default_for(2);
        Self {
            hidden: spec.hidden,
            embedding: spec.embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples per scored sampling run.
    pub samples: usize,
    /// Respaced lengths `T'` scored by `grid-gamma`.
    pub sample_steps: Vec<usize>,
    pub knn_k: usize,
    pub error_stride: usize,
    pub error_samples: usize,
    pub error_mode: ErrorMode,
    pub normality: NormalityTest,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 2_000,
            sample_steps: vec![10, 100, 1000],
            knn_k: 3,
            error_stride: 10,
            error_samples: 200,
            error_mode: ErrorMode::GenerationSide,
            normality: NormalityTest::ShapiroWilk,
        }
    }
}

/// Everything a training or grid run needs. The master `seed` feeds every
/// random stream; `train.seed` and `sampler.seed` must stay 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for sampling and metrics; 0 or 1 is single-threaded.
    pub threads: usize,
    pub dataset: DatasetSpec,
    pub data: DataConfig,
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            threads: 1,
            dataset: DatasetSpec::ring(),
            data: DataConfig::default(),
            schedule: ScheduleSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.seed != 0 || self.sampler.seed != 0 {
            return Err(Error::Config(
                "train.seed and sampler.seed are derived from the master seed; set `seed` instead".into(),
            ));
        }
        if self.data.train_size == 0 || self.data.reference_size < 2 {
            return Err(Error::Config("data.train_size must be >= 1 and data.reference_size >= 2".into()));
        }
        if self.eval.samples < 2 {
            return Err(Error::Config("eval.samples must be at least 2".into()));
        }
        self.train.validate()?;
        self.sampler.validate()?;
        self.schedule.build()?;
        Ok(())
    }

    /// Applies `IPDIFF_OUTPUT_DIR` and `IPDIFF_THREADS`.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(dir) = env_output_dir() {
            self.output_dir = dir;
        }
        if let Some(t) = env_threads()? {
            self.threads = t;
        }
        Ok(())
    }

    /// Training set and held-out reference set. Reference draws use their own
    /// stream and the training set's shrink factor.
    pub fn build_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::IdxImages { .. } => {
                let all = load_dataset(&self.dataset, 0, self.seed)?;
                let need = self.data.train_size + self.data.reference_size;
                if all.len() < need {
                    return Err(Error::Config(format!("idx file has {} images, config needs {need}", all.len())));
                }
                let (train_set, rest) = all.split(self.data.train_size)?;
                let reference = if rest.len() > self.data.reference_size {
                    rest.split(self.data.reference_size)?.0
                } else {
                    rest
                };
                Ok((train_set, reference))
            }
            spec => {
                let train_set = load_dataset(spec, self.data.train_size, derive_seed(self.seed, "run/data"))?;
                let reference = load_dataset(spec, self.data.reference_size, derive_seed(self.seed, "run/reference"))?
                    .rescaled(train_set.scale)?;
                Ok((train_set, reference))
            }
        }
    }

    pub fn mlp_spec(&self, data_dim: usize) -> Result<MlpSpec> {
        let spec = MlpSpec {
            data_dim,
            hidden: self.model.hidden.clone(),
            embedding: self.model.embedding,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Training settings with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Sampler settings with the master seed applied.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: derive_seed(self.seed, "run/sample"),
            threads: self.threads,
            ..self.sampler.clone()
        }
    }
}

fn env_output_dir() -> Option<PathBuf> {
    std::env::var_os(ENV_OUTPUT_DIR).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn env_threads() -> Result<Option<usize>> {
    match std::env::var(ENV_THREADS) {
        Ok(v) if !v.is_empty() => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{ENV_THREADS}={v} is not a thread count"))),
        _ => Ok(None),
    }
}

/// Output directory override from the environment, if set.
pub fn output_dir_override() -> Option<PathBuf> {
    env_output_dir()
}

/// Thread-count override from the environment, if set.
pub fn threads_override() -> Result<Option<usize>> {
    env_threads()
}

/// Inclusive arithmetic grid `start:stop:step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaRange {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GammaRange {
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || Error::InvalidArgument(format!("malformed range {text:?}; expected start:stop:step"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let r = Self {
            start: num(parts[0])?,
            stop: num(parts[1])?,
            step: num(parts[2])?,
        };
        if !(r.start >= 0.0) || !(r.stop >= r.start) || !(r.step > 0.0) || !r.stop.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "range {text:?} needs 0 <= start <= stop and step > 0"
            )));
        }
        Ok(r)
    }

    /// `floor((stop - start) / step) + 1` values, tolerant to rounding in
    /// the quotient.
    pub fn values(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|k| self.start + k as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleArgs {
    /// Respaced length; 0 means the training `T`.
    pub steps: usize,
    pub kind: SamplerKind,
    pub eta: f64,
    pub n: usize,
    pub seed: u64,
    pub variance: VarianceChoice,
    pub clip: bool,
    /// Use the EMA weights.
    pub ema: bool,
}

impl Default for SampleArgs {
    fn default() -> Self {
        Self {
            steps: 0,
            kind: SamplerKind::Ancestral,
            eta: 0.0,
            n: 1000,
            seed: 0,
            variance: VarianceChoice::PosteriorSmall,
            clip: false,
            ema: true,
        }
    }
}

impl SampleArgs {
    fn sampler(&self, threads: usize) -> SamplerConfig {
        SamplerConfig {
            kind: self.kind,
            eta: self.eta,
            steps: self.steps,
            variance: self.variance,
            seed: self.seed,
            clip_output: self.clip,
            record_trajectory: false,
            threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasArgs {
    pub mode: BiasMode,
    /// Empty: every step of the sampling schedule (deterministic mode only).
    pub t_grid: Vec<usize>,
    /// Draws (deterministic) or chains per step (stochastic).
    pub n: usize,
    pub seed: u64,
    /// Respaced sampling length; 0 means the training `T`.
    pub steps: usize,
    pub ema: bool,
}

impl Default for BiasArgs {
    fn default() -> Self {
        Self {
            mode: BiasMode::Deterministic,
            t_grid: Vec::new(),
            n: 1000,
            seed: 0,
            steps: 0,
            ema: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrstatsArgs {
    pub stride: usize,
    pub n: usize,
    pub mode: ErrorMode,
    pub test: NormalityTest,
    pub seed: u64,
    pub ema: bool,
}

impl Default for ErrstatsArgs {
    fn default() -> Self {
        Self {
            stride: 10,
            n: 200,
            mode: ErrorMode::GenerationSide,
            test: NormalityTest::ShapiroWilk,
            seed: 0,
            ema: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsArgs {
    pub k: usize,
    /// Permutations for the energy two-sample test; 0 skips it.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for MetricsArgs {
    fn default() -> Self {
        Self {
            k: 3,
            permutations: 0,
            seed: 0,
        }
    }
}

/// A complete, replayable command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Invocation {
    Train { config: ExperimentConfig },
    Sample { checkpoint: PathBuf, args: SampleArgs },
    Bias { checkpoint: PathBuf, args: BiasArgs },
    Errstats { checkpoint: PathBuf, args: ErrstatsArgs },
    Metrics { real: PathBuf, generated: PathBuf, args: MetricsArgs },
    GridGamma { config: ExperimentConfig, range: GammaRange },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Train { .. } => "train",
            Invocation::Sample { .. } => "sample",
            Invocation::Bias { .. } => "bias",
            Invocation::Errstats { .. } => "errstats",
            Invocation::Metrics { .. } => "metrics",
            Invocation::GridGamma { .. } => "grid-gamma",
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Invocation::Train { config } | Invocation::GridGamma { config, .. } => config.seed,
            Invocation::Sample { args, .. } => args.seed,
            Invocation::Bias { args, .. } => args.seed,
            Invocation::Errstats { args, .. } => args.seed,
            Invocation::Metrics { args, .. } => args.seed,
        }
    }

    /// SHA-256 of the invocation's TOML form.
    pub fn hash(&self) -> Result<String> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(sha256_hex(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_seconds: f64,
    /// Outputs that carry wall-clock data and are not hashed.
    pub volatile: Vec<String>,
    pub invocation: Invocation,
    pub outputs: Vec<OutputHash>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Relative paths of all files under `dir`, sorted, `/`-separated.
fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Summary of a finished command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
    /// Command-specific scalar results, in output order.
    pub summary: Vec<(String, f64)>,
}

/// Runs `inv` into `out` (created if needed) and writes the run manifest.
pub fn execute(inv: &Invocation, out: &Path, threads: usize) -> Result<RunResult> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let start = Instant::now();
    let (summary, volatile) = match inv {
        Invocation::Train { config } => run_train(config, out)?,
        Invocation::Sample { checkpoint, args } => (run_sample(checkpoint, args, out, threads)?, vec![]),
        Invocation::Bias { checkpoint, args } => (run_bias(checkpoint, args, out, threads)?, vec![]),
        Invocation::Errstats { checkpoint, args } => (run_errstats(checkpoint, args, out)?, vec![]),
        Invocation::Metrics { real, generated, args } => (run_metrics(real, generated, args, out)?, vec![]),
        Invocation::GridGamma { config, range } => run_grid_gamma(config, range, out)?,
    };
    let wall_seconds = start.elapsed().as_secs_f64();
    let mut outputs = Vec::new();
    for rel in list_files(out)? {
        if rel == RUN_MANIFEST || volatile.contains(&rel) {
            continue;
        }
        outputs.push(OutputHash {
            sha256: hash_file(&out.join(&rel))?,
            path: rel,
        });
    }
    let manifest = RunManifest {
        command: inv.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: inv.hash()?,
        seed: inv.seed(),
        threads,
        wall_seconds,
        volatile,
        invocation: inv.clone(),
        outputs,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = out.join(RUN_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(RunResult {
        manifest,
        out_dir: out.to_path_buf(),
        summary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub out_dir: PathBuf,
    pub matched: Vec<String>,
    /// Outputs whose hash changed, was missing, or is new.
    pub mismatched: Vec<String>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-runs the invocation recorded in a run manifest into `out`
/// single-threaded and compares output hashes.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayReport> {
    let recorded = RunManifest::load(manifest_path)?;
    if out.exists() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        return Err(Error::InvalidArgument(format!("replay directory {} is not empty", out.display())));
    }
    let fresh = execute(&recorded.invocation, out, 1)?.manifest;
    let mut matched = Vec::new();
    let mut mismatched = Vec::new();
    for o in &recorded.outputs {
        match fresh.outputs.iter().find(|f| f.path == o.path) {
            Some(f) if f.sha256 == o.sha256 => matched.push(o.path.clone()),
            _ => mismatched.push(o.path.clone()),
        }
    }
    for f in &fresh.outputs {
        if !recorded.outputs.iter().any(|o| o.path == f.path) {
            mismatched.push(f.path.clone());
        }
    }
    Ok(ReplayReport {
        out_dir: out.to_path_buf(),
        matched,
        mismatched,
    })
}

/// Trains one model per the config and writes checkpoints and the log under
/// `out`; returns the EMA model of the final step.
fn train_into(cfg: &ExperimentConfig, train_set: &Dataset, out: &Path) -> Result<(crate::denoiser::Denoiser, Vec<PathBuf>)> {
    let spec = cfg.mlp_spec(train_set.dim())?;
    let outputs = TrainOutputs {
        dir: out.to_path_buf(),
        dataset: Some(cfg.dataset.clone()),
    };
    let tc = cfg.train_config();
    Ok(match tc.dtype {
        DType::F32 => {
            let run = train::<f32>(train_set, &cfg.schedule, &spec, &tc, Some(&outputs))?;
            (crate::denoiser::Denoiser::MlpF32(run.state.ema), run.checkpoints)
        }
        DType::F64 => {
            let run = train::<f64>(train_set, &cfg.schedule, &spec, &tc, Some(&outputs))?;
            (crate::denoiser::Denoiser::MlpF64(run.state.ema), run.checkpoints)
        }
    })
}

fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<(String, f64)>, Vec<String>)> {
    cfg.validate()?;
    let (train_set, _) = cfg.build_data()?;
    let (_, checkpoints) = train_into(cfg, &train_set, out)?;
    let summary = vec![
        ("checkpoints".to_string(), checkpoints.len() as f64),
        ("train_size".to_string(), train_set.len() as f64),
    ];
    Ok((summary, vec![LOG_FILE.to_string()]))
}

/// Image shape implied by a checkpoint: square images for IDX data.
fn image_shape(ckpt: &Checkpoint) -> Option<(usize, usize)> {
    match ckpt.manifest.dataset {
        Some(DatasetSpec::IdxImages { .. }) => {
            let d = ckpt.manifest.architecture.data_dim;
            let side = (d as f64).sqrt().round() as usize;
            (side * side == d).then_some((side, side))
        }
        _ => None,
    }
}

fn load_checkpoint(dir: &Path) -> Result<(Checkpoint, NoiseSchedule)> {
    let ckpt = Checkpoint::load(dir)?;
    let schedule = ckpt.manifest.schedule.build()?;
    Ok((ckpt, schedule))
}

fn run_sample(checkpoint: &Path, args: &SampleArgs, out: &Path, threads: usize) -> Result<Vec<(String, f64)>> {
    let (ckpt, schedule) = load_checkpoint(checkpoint)?;
    let sampler = args.sampler(threads);
    let view = sampler.view(&schedule)?;
    let run = sample(ckpt.model(args.ema), args.n, &view, &sampler)?;
    write_dump(out, "samples", &run.final_x, image_shape(&ckpt))?;
    let summary = vec![
        ("n".to_string(), args.n as f64),
        ("steps_executed".to_string(), run.steps_executed as f64),
        ("start_t".to_string(), run.start_t as f64),
    ];
    write_summary(out, "sample_info.csv", &summary)?;
    Ok(summary)
}

fn write_summary(out: &Path, name: &str, rows: &[(String, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows.iter().map(|(k, v)| vec![k.clone(), v.to_string()]).collect();
    write_csv_table(out.join(name), &["key", "value"], &rows)
}

/// Fresh draws from the checkpoint's data law at the training shrink.
fn eval_data(ckpt: &Checkpoint, n: usize, seed: u64, label: &str) -> Result<Dataset> {
    let spec = ckpt
        .manifest
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("checkpoint does not record its dataset".into()))?;
    match spec {
        DatasetSpec::IdxImages { .. } => load_dataset(spec, 0, seed),
        _ => load_dataset(spec, n, derive_seed(seed, label))?.rescaled(ckpt.manifest.dataset_scale),
    }
}

fn run_bias(checkpoint: &Path, args: &BiasArgs, out: &Path, threads: usize) -> Result<Vec<(String, f64)>> {
    let (ckpt, schedule) = load_checkpoint(checkpoint)?;
    let model = ckpt.model(args.ema);
    let cfg = MeasureConfig {
        seed: args.seed,
        t_grid: args.t_grid.clone(),
        sampler: SamplerConfig {
            steps: args.steps,
            seed: derive_seed(args.seed, "bias/sampler"),
            threads,
            ..SamplerConfig::default()
        },
    };
    let table = match args.mode {
        BiasMode::Deterministic => {
            let data = eval_data(&ckpt, args.n.max(2), args.seed, "bias/data")?;
            exposure_bias_deterministic(model, &data, args.n, &schedule, &cfg)?
        }
        BiasMode::Stochastic => {
            if args.t_grid.is_empty() {
                return Err(Error::InvalidArgument("stochastic bias needs an explicit t grid".into()));
            }
            let mut real = eval_data(&ckpt, args.n, args.seed, "bias/data")?;
            let mut reference = eval_data(&ckpt, args.n, args.seed, "bias/reference")?;
            if let DatasetSpec::IdxImages { .. } = real.spec {
                // Disjoint halves of the file.
                let (a, b) = real.split(real.len() / 2)?;
                real = a;
                reference = b;
            }
            exposure_bias_stochastic(model, &real, &reference, &args.t_grid, args.n, &schedule, &cfg)?
        }
    };
    table.write_csv(out.join("bias.csv"))?;
    Ok(table.points().into_iter().map(|(t, v)| (format!("t{t}"), v)).collect())
}

fn run_errstats(checkpoint: &Path, args: &ErrstatsArgs, out: &Path) -> Result<Vec<(String, f64)>> {
    let (ckpt, schedule) = load_checkpoint(checkpoint)?;
    let data = eval_data(&ckpt, args.n, args.seed, "errstats/data")?;
    let cfg = ErrorStatsConfig {
        mode: args.mode,
        test: args.test,
        seed: args.seed,
        max_tests: 0,
        sampler: SamplerConfig {
            seed: derive_seed(args.seed, "errstats/sampler"),
            ..SamplerConfig::default()
        },
    };
    let stats = prediction_error_stats(ckpt.model(args.ema), &data, &schedule, args.stride, args.n, &cfg)?;
    stats.write_csv(out.join("errstats.csv"))?;
    let tests: usize = stats.entries.iter().map(|e| e.verdicts.len()).sum();
    let rejected: usize = stats.entries.iter().map(|e| e.rejections()).sum();
    let reports = vec![
        MetricReport::new("mean_nu", stats.mean_nu, args.n, 0, args.seed)?,
        MetricReport::new("normality_tests", tests as f64, args.n, 0, args.seed)?,
        MetricReport::new("normality_rejections", rejected as f64, args.n, 0, args.seed)?,
    ];
    write_metric_reports(out.join("errstats_summary.csv"), &reports)?;
    Ok(reports.into_iter().map(|r| (r.metric, r.value)).collect())
}

/// Point sets from `.csv` (header row, one point per row) or tensor `.bin`.
pub fn read_points(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_points_csv(path),
        Some("bin") => Tensor::load(path),
        _ => Err(Error::InvalidArgument(format!(
            "{}: expected a .csv or .bin point file",
            path.display()
        ))),
    }
}

/// Energy distance, Fréchet distance and kNN precision / recall.
pub fn distribution_metrics(real: &Tensor, generated: &Tensor, args: &MetricsArgs) -> Result<Vec<MetricReport>> {
    let (nr, ng) = (real.dims2()?.0, generated.dims2()?.0);
    let report = |name: &str, v: f64| MetricReport::new(name, v, nr, ng, args.seed);
    let mut reports = vec![report("energy_distance", energy_distance(real, generated)?)?];
    let fd = frechet_gaussian_distance(&fit_gaussian_stats(real)?, &fit_gaussian_stats(generated)?)?;
    reports.push(report("frechet_distance", fd)?);
    let (precision, recall) = knn_precision_recall(real, generated, args.k)?;
    reports.push(report(&format!("precision_k{}", args.k), precision)?);
    reports.push(report(&format!("recall_k{}", args.k), recall)?);
    if args.permutations > 0 {
        let t = energy_test(real, generated, args.permutations, args.seed)?;
        reports.push(report("energy_test_p_value", t.p_value)?);
    }
    Ok(reports)
}

fn run_metrics(real: &Path, generated: &Path, args: &MetricsArgs, out: &Path) -> Result<Vec<(String, f64)>> {
    let reports = distribution_metrics(&read_points(real)?, &read_points(generated)?, args)?;
    write_metric_reports(out.join("metrics.csv"), &reports)?;
    Ok(reports.into_iter().map(|r| (r.metric, r.value)).collect())
}

/// Scores a trained model: sample distance to the reference per `T'` in
/// `eval.sample_steps`, in that order.
pub fn score_model(
    cfg: &ExperimentConfig,
    model: &dyn EpsilonModel,
    reference: &Dataset,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let images = reference.image_shape.is_some();
    cfg.eval
        .sample_steps
        .iter()
        .map(|&steps| {
            let sampler = SamplerConfig {
                steps,
                ..cfg.sampler_config()
            };
            let view = sampler.view(schedule)?;
            let x = sample(model, cfg.eval.samples, &view, &sampler)?.final_x;
            crate::eval::sample_distance(&x, reference.samples(), images)
        })
        .collect()
}

fn run_grid_gamma(
    cfg: &ExperimentConfig,
    range: &GammaRange,
    out: &Path,
) -> Result<(Vec<(String, f64)>, Vec<String>)> {
    cfg.validate()?;
    let (train_set, reference) = cfg.build_data()?;
    let schedule = cfg.schedule.build()?;
    let metric = if reference.image_shape.is_some() { "frechet" } else { "energy" };
    let mut header: Vec<String> = vec!["gamma".into()];
    header.extend(cfg.eval.sample_steps.iter().map(|s| format!("{metric}_steps{s}")));
    header.push("mean_nu".into());
    let mut rows = Vec::new();
    let mut volatile = Vec::new();
    let mut summary = Vec::new();
    for (i, gamma) in range.values().into_iter().enumerate() {
        let arm = ExperimentConfig {
            train: TrainConfig {
                mode: Mode::Ip,
                gamma,
                ..cfg.train.clone()
            },
            ..cfg.clone()
        };
        let dir_name = format!("gamma-{i:03}");
        let (model, _) = train_into(&arm, &train_set, &out.join(&dir_name))?;
        volatile.push(format!("{dir_name}/{LOG_FILE}"));
        let scores = score_model(&arm, &model, &reference, &schedule)?;
        let err_cfg = ErrorStatsConfig {
            mode: cfg.eval.error_mode,
            test: cfg.eval.normality,
            seed: derive_seed(cfg.seed, "grid/errstats"),
            max_tests: 0,
            sampler: SamplerConfig::default(),
        };
        let stats = prediction_error_stats(
            &model,
            &train_set,
            &schedule,
            cfg.eval.error_stride,
            cfg.eval.error_samples,
            &err_cfg,
        )?;
        let mut row = vec![gamma.to_string()];
        row.extend(scores.iter().map(|s| s.to_string()));
        row.push(stats.mean_nu.to_string());
        rows.push(row);
        summary.push((format!("gamma{gamma}"), scores.last().copied().unwrap_or(f64::NAN)));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv_table(out.join("grid_gamma.csv"), &header_refs, &rows)?;
    Ok((summary, volatile))
}
