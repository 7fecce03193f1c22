//! Measurements on a model: exposure bias (deterministic and stochastic),
//! prediction-error statistics with normality checks, and an empirical
//! Lipschitz estimate of the noise predictor.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::distance::{energy_distance, fit_gaussian_stats, frechet_gaussian_distance};
use super::normality::{NormalityTest, NormalityVerdict};
use crate::data::{write_csv_table, Dataset};
use crate::denoiser::EpsilonModel;
use crate::error::{Error, Result};
use crate::forward::{predict_x0, q_sample_batch};
use crate::rng::{normal_vec, stream, StreamRng};
use crate::sampling::{chain_streams, reverse_from, reverse_step, SamplerConfig, SamplerKind};
use crate::schedule::{NoiseSchedule, StepTable};
use crate::tensor::Tensor;

/// Values per normality test.
pub const NORMALITY_SUBSAMPLE: usize = 50;

/// Minimum draws per `t` for prediction-error statistics.
pub const MIN_ERROR_SAMPLES: usize = 100;

/// Errors at or below this magnitude count as exactly zero.
const ZERO_ERROR_TOL: f64 = 1e-9;

fn draw_rows(rng: &mut StreamRng, n: usize, len: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

fn normal_tensor(rng: &mut StreamRng, rows: usize, dim: usize) -> Tensor {
    Tensor::from_vec([rows, dim], normal_vec(rng, rows * dim)).expect("noise shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasEntry {
    pub t: usize,
    /// Draws (deterministic) or chains (stochastic) at this `t`.
    pub count: usize,
    /// `None` when `count` is 0.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasTable {
    pub mode: BiasMode,
    /// `delta_bar`, `energy_distance` or `frechet_distance`.
    pub metric: &'static str,
    pub entries: Vec<BiasEntry>,
}

impl BiasTable {
    /// `(t, value)` for entries that carry a value.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .filter_map(|e| e.value.map(|v| (e.t as f64, v)))
            .collect()
    }

    /// Merges consecutive entries into `buckets` groups of near-equal size;
    /// each bucket reports its count-weighted mean at the largest member `t`.
    pub fn bucketed(&self, buckets: usize) -> Result<BiasTable> {
        if buckets == 0 {
            return Err(Error::InvalidArgument("bucket count must be positive".into()));
        }
        let n = self.entries.len();
        let mut out = Vec::with_capacity(buckets.min(n));
        for b in 0..buckets.min(n) {
            let group = &self.entries[b * n / buckets.min(n)..(b + 1) * n / buckets.min(n)];
            let count: usize = group.iter().map(|e| e.count).sum();
            let total: f64 = group.iter().filter_map(|e| e.value.map(|v| v * e.count as f64)).sum();
            out.push(BiasEntry {
                t: group.last().map_or(0, |e| e.t),
                count,
                value: (count > 0).then(|| total / count as f64),
            });
        }
        Ok(BiasTable {
            mode: self.mode,
            metric: self.metric,
            entries: out,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .entries
            .iter()
            .map(|e| vec![e.t.to_string(), e.count.to_string(), e.value.map_or(String::new(), |v| v.to_string())])
            .collect();
        write_csv_table(path, &["t", "count", self.metric], &rows)
    }
}

/// Options shared by the bias and error measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub seed: u64,
    /// Steps to evaluate; empty means every step of the sampling schedule.
    pub t_grid: Vec<usize>,
    pub sampler: SamplerConfig,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t_grid: Vec::new(),
            sampler: SamplerConfig::default(),
        }
    }
}

fn resolve_grid(grid: &[usize], view: &dyn StepTable) -> Result<Vec<usize>> {
    if grid.is_empty() {
        return Ok((1..=view.len()).map(|i| view.step(i)).collect());
    }
    let mut g = grid.to_vec();
    g.sort_unstable();
    g.dedup();
    for &t in &g {
        if t != 0 && view.position_of(t).is_none() {
            return Err(Error::InvalidArgument(format!("step {t} is not in the sampling schedule")));
        }
    }
    Ok(g)
}

/// Deterministic exposure-bias measurement. Each of `n` draws picks a data
/// point `x0`, a step `t` from the grid and noise `eps`, runs the
/// noise-free reverse chain from `x_t` and records
/// `||x0 - x0_hat||_1 / M`; entries report the per-`t` mean `delta_bar`.
///
/// The sampler is forced noise-free (ancestral becomes the deterministic
/// chain, DDIM gets `eta = 0`) and its output is clamped to `[-1, 1]`, so
/// every `delta_bar` lies in `[0, 2]`.
pub fn exposure_bias_deterministic(
    model: &dyn EpsilonModel,
    data: &Dataset,
    n: usize,
    schedule: &NoiseSchedule,
    cfg: &MeasureConfig,
) -> Result<BiasTable> {
    if n == 0 {
        return Err(Error::InvalidArgument("iteration count must be positive".into()));
    }
    let mut sampler = cfg.sampler.clone();
    sampler.clip_output = true;
    match sampler.kind {
        SamplerKind::Ancestral => sampler.kind = SamplerKind::Deterministic,
        SamplerKind::Ddim => sampler.eta = 0.0,
        SamplerKind::Deterministic => {}
    }
    let view = sampler.view(schedule)?;
    let grid: Vec<usize> = resolve_grid(&cfg.t_grid, &view)?.into_iter().filter(|&t| t > 0).collect();
    if grid.is_empty() {
        return Err(Error::InvalidArgument("t grid has no positive steps".into()));
    }
    let dim = data.dim();
    let mut rng = stream(cfg.seed, "eval/bias-det");
    let rows = draw_rows(&mut rng, n, data.len());
    let steps: Vec<usize> = (0..n).map(|_| grid[rng.random_range(0..grid.len())]).collect();
    let eps = normal_tensor(&mut rng, n, dim);
    let x0 = data.batch(&rows);
    let xt = q_sample_batch(&x0, &steps, &eps, schedule)?;

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &t) in steps.iter().enumerate() {
        groups.entry(t).or_default().push(k);
    }
    let mut delta = vec![0.0; n];
    for (&t, members) in &groups {
        let x_group = gather(&xt, members, dim);
        let x0_hat = reverse_from(model, &x_group, t, &view, &sampler)?.final_x;
        for (r, &k) in members.iter().enumerate() {
            let l1: f64 = x0.row(k).iter().zip(x0_hat.row(r)).map(|(a, b)| (a - b).abs()).sum();
            delta[k] = l1 / dim as f64;
        }
    }
    let entries = grid
        .iter()
        .map(|&t| {
            let members = groups.get(&t).map_or(&[][..], |v| v.as_slice());
            let count = members.len();
            let mean = (count > 0).then(|| members.iter().map(|&k| delta[k]).sum::<f64>() / count as f64);
            BiasEntry { t, count, value: mean }
        })
        .collect();
    Ok(BiasTable {
        mode: BiasMode::Deterministic,
        metric: "delta_bar",
        entries,
    })
}

fn gather(x: &Tensor, rows: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::from_vec([rows.len(), dim], data).expect("gather shape")
}

/// Distance used for stochastic bias: energy distance for point data,
/// Fréchet distance over raw pixels for images.
pub fn sample_distance(a: &Tensor, b: &Tensor, images: bool) -> Result<f64> {
    if images {
        frechet_gaussian_distance(&fit_gaussian_stats(a)?, &fit_gaussian_stats(b)?)
    } else {
        energy_distance(a, b)
    }
}

/// Stochastic exposure-bias measurement: for each `t`, the same `n_chains`
/// real samples and the same noise are diffused to `x_t`, run through the
/// sampler back to step 0 and compared with `reference`. `t = 0` compares
/// the real batch itself and gives the noise floor.
pub fn exposure_bias_stochastic(
    model: &dyn EpsilonModel,
    data: &Dataset,
    reference: &Dataset,
    t_list: &[usize],
    n_chains: usize,
    schedule: &NoiseSchedule,
    cfg: &MeasureConfig,
) -> Result<BiasTable> {
    if n_chains < 2 || n_chains > data.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_chains} chains need 2..={} real samples",
            data.len()
        )));
    }
    if reference.len() < 2 || reference.dim() != data.dim() {
        return Err(Error::InvalidArgument("reference set needs at least 2 samples of matching dimension".into()));
    }
    let view = cfg.sampler.view(schedule)?;
    let grid = resolve_grid(t_list, &view)?;
    let dim = data.dim();
    let mut rng = stream(cfg.seed, "eval/bias-stoch");
    let rows: Vec<usize> = sample_indices(&mut rng, data.len(), n_chains).into_vec();
    let x0 = data.batch(&rows);
    let eps = normal_tensor(&mut rng, n_chains, dim);
    let images = data.image_shape.is_some();
    let mut entries = Vec::with_capacity(grid.len());
    for &t in &grid {
        let x0_hat = if t == 0 {
            x0.clone()
        } else {
            let xt = q_sample_batch(&x0, &vec![t; n_chains], &eps, schedule)?;
            reverse_from(model, &xt, t, &view, &cfg.sampler)?.final_x
        };
        entries.push(BiasEntry {
            t,
            count: n_chains,
            value: Some(sample_distance(&x0_hat, reference.samples(), images)?),
        });
    }
    Ok(BiasTable {
        mode: BiasMode::Stochastic,
        metric: if images { "frechet_distance" } else { "energy_distance" },
        entries,
    })
}

/// Where `x_hat_t` comes from when measuring the prediction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Along sampled reverse chains started from `x_T = q(x_T | x0)`.
    #[default]
    GenerationSide,
    /// At ground-truth `x_t = q(x_t | x0)`.
    TeacherForced,
}

impl ErrorMode {
    pub fn name(self) -> &'static str {
        match self {
            ErrorMode::GenerationSide => "generation_side",
            ErrorMode::TeacherForced => "teacher_forced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorStatsConfig {
    pub mode: ErrorMode,
    pub test: NormalityTest,
    pub seed: u64,
    /// Coordinates tested per `t`; 0 tests every coordinate.
    pub max_tests: usize,
    /// Sampler for generation-side chains; always run on the full schedule.
    pub sampler: SamplerConfig,
}

impl Default for ErrorStatsConfig {
    fn default() -> Self {
        Self {
            mode: ErrorMode::GenerationSide,
            test: NormalityTest::ShapiroWilk,
            seed: 0,
            max_tests: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorEntry {
    pub t: usize,
    /// Error coordinates pooled for `mu` and `nu`.
    pub count: usize,
    pub mu: f64,
    pub nu: f64,
    /// One verdict per tested coordinate; empty when `nu = 0`.
    pub verdicts: Vec<NormalityVerdict>,
}

impl ErrorEntry {
    pub fn rejections(&self) -> usize {
        self.verdicts.iter().filter(|v| v.reject).count()
    }

    pub fn rejection_rate(&self) -> Option<f64> {
        (!self.verdicts.is_empty()).then(|| self.rejections() as f64 / self.verdicts.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub mode: ErrorMode,
    pub test: NormalityTest,
    pub entries: Vec<ErrorEntry>,
    /// Mean of `nu` over the sampled steps.
    pub mean_nu: f64,
}

impl ErrorStats {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let rows: Vec<Vec<String>> = self
            .entries
            .iter()
            .map(|e| {
                let mean_stat = (!e.verdicts.is_empty())
                    .then(|| e.verdicts.iter().map(|v| v.statistic).sum::<f64>() / e.verdicts.len() as f64);
                vec![
                    e.t.to_string(),
                    e.count.to_string(),
                    e.mu.to_string(),
                    e.nu.to_string(),
                    e.verdicts.len().to_string(),
                    e.rejections().to_string(),
                    opt(e.rejection_rate()),
                    opt(mean_stat),
                    opt(median(e.verdicts.iter().map(|v| v.p_value).collect())),
                ]
            })
            .collect();
        write_csv_table(
            path,
            &["t", "count", "mu", "nu", "tests", "rejections", "rejection_rate", "mean_statistic", "median_p_value"],
            &rows,
        )
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Fits `mu`, `nu` to the pooled errors at one step and tests standardized
/// subsamples per coordinate.
fn error_entry(
    t: usize,
    e: &Tensor,
    cfg: &ErrorStatsConfig,
    rng: &mut StreamRng,
) -> Result<ErrorEntry> {
    let (rows, dim) = e.dims2()?;
    let count = rows * dim;
    let mu = e.data().iter().sum::<f64>() / count as f64;
    let nu = (e.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64).sqrt();
    let largest = e.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut verdicts = Vec::new();
    if largest <= ZERO_ERROR_TOL {
        return Ok(ErrorEntry { t, count, mu, nu, verdicts });
    }
    if nu <= ZERO_ERROR_TOL {
        return Err(Error::Degenerate(format!(
            "prediction error at step {t} is a nonzero constant ({mu:e}); nu = 0 cannot standardize it"
        )));
    }
    let tests = if cfg.max_tests == 0 { dim } else { cfg.max_tests.min(dim) };
    for i in 0..tests {
        let picks = sample_indices(rng, rows, NORMALITY_SUBSAMPLE);
        let standardized: Vec<f64> = picks.iter().map(|r| (e.row(r)[i] - mu) / nu).collect();
        match cfg.test.run(&standardized) {
            Ok(v) => verdicts.push(v),
            // A coordinate whose subsample is constant is non-normal.
            Err(Error::Degenerate(_)) => verdicts.push(NormalityVerdict {
                statistic: f64::NAN,
                p_value: 0.0,
                reject: true,
            }),
            Err(err) => return Err(err),
        }
    }
    Ok(ErrorEntry { t, count, mu, nu, verdicts })
}

/// Statistics of `e_t = x0_hat - x0` at `t = stride, 2 stride, ... <= T`,
/// with `n` draws per step. Coordinates are pooled for `mu_t` and `nu_t`;
/// each tested coordinate contributes 50 standardized values
/// `(e - mu_t) / nu_t` to one normality test.
pub fn prediction_error_stats(
    model: &dyn EpsilonModel,
    data: &Dataset,
    schedule: &NoiseSchedule,
    stride: usize,
    n: usize,
    cfg: &ErrorStatsConfig,
) -> Result<ErrorStats> {
    if n < MIN_ERROR_SAMPLES {
        return Err(Error::InvalidArgument(format!("need at least {MIN_ERROR_SAMPLES} samples per step, got {n}")));
    }
    let big_t = schedule.steps();
    if stride == 0 || stride > big_t {
        return Err(Error::InvalidArgument(format!("stride {stride} outside 1..={big_t}")));
    }
    let grid: Vec<usize> = (1..=big_t / stride).map(|k| k * stride).collect();
    let dim = data.dim();
    let mut rng = stream(cfg.seed, "eval/errstats");
    let mut test_rng = stream(cfg.seed, "eval/errstats-subsample");

    let mut entries = Vec::with_capacity(grid.len());
    match cfg.mode {
        ErrorMode::TeacherForced => {
            for &t in &grid {
                let x0 = data.batch(&draw_rows(&mut rng, n, data.len()));
                let eps = normal_tensor(&mut rng, n, dim);
                let xt = q_sample_batch(&x0, &vec![t; n], &eps, schedule)?;
                let e = x0_error(model, &xt, &x0, t, schedule)?;
                entries.push(error_entry(t, &e, cfg, &mut test_rng)?);
            }
        }
        ErrorMode::GenerationSide => {
            let x0 = data.batch(&draw_rows(&mut rng, n, data.len()));
            let eps = normal_tensor(&mut rng, n, dim);
            let mut x = q_sample_batch(&x0, &vec![big_t; n], &eps, schedule)?;
            let mut chains = chain_streams(cfg.seed, "eval/errstats-chain", n);
            let mut pending = grid.iter().rev().peekable();
            for t in (1..=big_t).rev() {
                if pending.peek() == Some(&&t) {
                    let e = x0_error(model, &x, &x0, t, schedule)?;
                    entries.push(error_entry(t, &e, cfg, &mut test_rng)?);
                    pending.next();
                }
                x = reverse_step(model, &x, t, schedule, &cfg.sampler, &mut chains)?;
            }
            entries.reverse();
        }
    }
    let mean_nu = entries.iter().map(|e| e.nu).sum::<f64>() / entries.len() as f64;
    Ok(ErrorStats {
        mode: cfg.mode,
        test: cfg.test,
        entries,
        mean_nu,
    })
}

fn x0_error(model: &dyn EpsilonModel, xt: &Tensor, x0: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    let eps_hat = model.predict_eps(xt, t, schedule)?;
    predict_x0(xt, &eps_hat, t, schedule)?.sub(x0)
}

/// One named scalar with provenance, as written to metric CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub count_a: usize,
    pub count_b: usize,
    pub seed: u64,
    pub half_width: Option<f64>,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, value: f64, count_a: usize, count_b: usize, seed: u64) -> Result<Self> {
        let metric = metric.into();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {metric}")));
        }
        Ok(Self {
            metric,
            value,
            count_a,
            count_b,
            seed,
            half_width: None,
        })
    }
}

pub fn write_metric_reports(path: impl AsRef<Path>, reports: &[MetricReport]) -> Result<()> {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.metric.clone(),
                r.value.to_string(),
                r.count_a.to_string(),
                r.count_b.to_string(),
                r.seed.to_string(),
                r.half_width.map_or(String::new(), |h| h.to_string()),
            ]
        })
        .collect();
    write_csv_table(path, &["metric", "value", "count_a", "count_b", "seed", "half_width"], &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    pub t: usize,
    pub max: f64,
    pub p95: f64,
    pub pairs: usize,
}

impl LipschitzEstimate {
    pub fn reports(&self, seed: u64) -> Result<Vec<MetricReport>> {
        Ok(vec![
            MetricReport::new(format!("lipschitz_max_t{}", self.t), self.max, self.pairs, self.pairs, seed)?,
            MetricReport::new(format!("lipschitz_p95_t{}", self.t), self.p95, self.pairs, self.pairs, seed)?,
        ])
    }
}

/// Linear-interpolated quantile of unsorted values, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Ratios `||eps(x, t) - eps(y, t)|| / ||x - y||` with `x = q(x_t | x0)`
/// for data points `x0` and `y = x + radius u`, `u` a random unit vector.
pub fn empirical_lipschitz(
    model: &dyn EpsilonModel,
    data: &Dataset,
    schedule: &NoiseSchedule,
    t: usize,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius {radius} must be positive")));
    }
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("pair count must be positive".into()));
    }
    let dim = data.dim();
    let mut rng = stream(seed, "eval/lipschitz");
    let x0 = data.batch(&draw_rows(&mut rng, n_pairs, data.len()));
    let eps = normal_tensor(&mut rng, n_pairs, dim);
    let x = q_sample_batch(&x0, &vec![t; n_pairs], &eps, schedule)?;
    let mut y = x.clone();
    for r in 0..n_pairs {
        let u = normal_vec(&mut rng, dim);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (k, uk) in u.iter().enumerate() {
            y.data_mut()[r * dim + k] += radius * uk / norm;
        }
    }
    let fx = model.predict_eps(&x, t, schedule)?;
    let fy = model.predict_eps(&y, t, schedule)?;
    let norm = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let ratios: Vec<f64> = (0..n_pairs)
        .map(|r| norm(fx.row(r), fy.row(r)) / norm(x.row(r), y.row(r)))
        .collect();
    if ratios.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Lipschitz ratio".into()));
    }
    Ok(LipschitzEstimate {
        t,
        max: ratios.iter().cloned().fold(0.0, f64::max),
        p95: quantile(&ratios, 0.95),
        pairs: n_pairs,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of length >= 2".into()));
    }
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("spearman of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
