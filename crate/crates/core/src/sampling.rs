//! Reverse-process samplers over a full or respaced schedule.
//!
//! Positions `i = len..=1` index the view; the model is conditioned on the
//! parent step `view.step(i)`. Noise is never added on position 1, the last
//! step of every chain. Each chain owns an RNG stream derived from
//! `(seed, label, chain index)`, so outputs do not depend on how chains are
//! split across threads.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_pgm_grid, write_points_csv};
use crate::denoiser::EpsilonModel;
use crate::error::{Error, Result};
use crate::forward::predict_x0_with;
use crate::rng::{indexed_stream, StreamRng};
use crate::schedule::{NoiseSchedule, RespacedSchedule, StepTable};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ancestral,
    Deterministic,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceChoice {
    /// The posterior variance `sigma_t^2`.
    PosteriorSmall,
    /// `beta_t`.
    BetaLarge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Used only by `ddim`.
    pub eta: f64,
    /// Respaced length `T'`; 0 means the full schedule.
    pub steps: usize,
    pub variance: VarianceChoice,
    pub seed: u64,
    /// Clamp the final output to `[-1, 1]`.
    pub clip_output: bool,
    pub record_trajectory: bool,
    /// Worker threads; 0 or 1 runs on the calling thread.
    pub threads: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ancestral,
            eta: 0.0,
            steps: 0,
            variance: VarianceChoice::PosteriorSmall,
            seed: 0,
            clip_output: false,
            record_trajectory: false,
            threads: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }

    /// The full schedule when `steps` is 0 or `T`, the respaced one otherwise.
    pub fn view(&self, schedule: &NoiseSchedule) -> Result<ScheduleView> {
        if self.steps == 0 || self.steps == schedule.steps() {
            Ok(ScheduleView::Full(schedule.clone()))
        } else {
            Ok(ScheduleView::Respaced(schedule.respace(self.steps)?))
        }
    }

    fn draws_noise(&self) -> bool {
        match self.kind {
            SamplerKind::Ancestral => true,
            SamplerKind::Deterministic => false,
            SamplerKind::Ddim => self.eta > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleView {
    Full(NoiseSchedule),
    Respaced(RespacedSchedule),
}

impl ScheduleView {
    fn inner(&self) -> &dyn StepTable {
        match self {
            ScheduleView::Full(s) => s,
            ScheduleView::Respaced(r) => r,
        }
    }
}

impl StepTable for ScheduleView {
    fn schedule(&self) -> &NoiseSchedule {
        self.inner().schedule()
    }
    fn len(&self) -> usize {
        self.inner().len()
    }
    fn step(&self, i: usize) -> usize {
        self.inner().step(i)
    }
    fn beta_at(&self, i: usize) -> f64 {
        self.inner().beta_at(i)
    }
    fn alpha_bar_at(&self, i: usize) -> f64 {
        self.inner().alpha_bar_at(i)
    }
    fn alpha_bar_prev_at(&self, i: usize) -> f64 {
        self.inner().alpha_bar_prev_at(i)
    }
    fn posterior_var_at(&self, i: usize) -> f64 {
        self.inner().posterior_var_at(i)
    }
    fn position_of(&self, t: usize) -> Option<usize> {
        self.inner().position_of(t)
    }
}

/// One reverse update at view position `pos` with explicit noise `z`
/// (`None` adds nothing).
pub fn reverse_step_with_noise(
    model: &dyn EpsilonModel,
    x: &Tensor,
    pos: usize,
    view: &dyn StepTable,
    cfg: &SamplerConfig,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    if pos == 0 || pos > view.len() {
        return Err(Error::StepOutOfRange { t: pos, max: view.len() });
    }
    let eps = model.predict_eps(x, view.step(pos), view.schedule())?;
    let ab = view.alpha_bar_at(pos);
    let ab_prev = view.alpha_bar_prev_at(pos);
    let beta = view.beta_at(pos);
    let (mut out, noise_sd) = match cfg.kind {
        SamplerKind::Ancestral | SamplerKind::Deterministic => {
            let c1 = 1.0 / (1.0 - beta).sqrt();
            let c2 = beta / (1.0 - ab).sqrt();
            let mean = zip(x, &eps, |xv, ev| c1 * (xv - c2 * ev))?;
            let var = match cfg.variance {
                VarianceChoice::PosteriorSmall => view.posterior_var_at(pos),
                VarianceChoice::BetaLarge => beta,
            };
            (mean, var.sqrt())
        }
        SamplerKind::Ddim => {
            let x0 = predict_x0_with(x, &eps, ab)?;
            let sigma = cfg.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            let keep = ab_prev.sqrt();
            (zip(&x0, &eps, |a, e| keep * a + dir * e)?, sigma)
        }
    };
    if let Some(z) = z {
        if z.shape() != out.shape() {
            return Err(Error::ShapeMismatch {
                op: "reverse_step",
                lhs: out.shape().to_vec(),
                rhs: z.shape().to_vec(),
            });
        }
        for (o, zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += noise_sd * zv;
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("sampler state at step {}", view.step(pos))));
    }
    Ok(out)
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

/// Draws one row of noise per chain, each from its own stream.
fn chain_noise(rngs: &mut [StreamRng], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rngs.len() * dim);
    for rng in rngs.iter_mut() {
        data.extend((0..dim).map(|_| -> f64 { StandardNormal.sample(rng) }));
    }
    Tensor::from_vec([rngs.len(), dim], data).expect("noise shape")
}

/// One reverse update at parent step `t`, which must belong to the view.
/// Row `i` draws its noise from `rngs[i]`; position 1 draws none.
pub fn reverse_step(
    model: &dyn EpsilonModel,
    x: &Tensor,
    t: usize,
    view: &dyn StepTable,
    cfg: &SamplerConfig,
    rngs: &mut [StreamRng],
) -> Result<Tensor> {
    let pos = view
        .position_of(t)
        .ok_or_else(|| Error::InvalidArgument(format!("step {t} is not in the sampling schedule")))?;
    let (rows, dim) = x.dims2()?;
    if rngs.len() != rows {
        return Err(Error::InvalidArgument(format!("{} streams for {rows} chains", rngs.len())));
    }
    let z = (pos > 1 && cfg.draws_noise()).then(|| chain_noise(rngs, dim));
    reverse_step_with_noise(model, x, pos, view, cfg, z.as_ref())
}

/// Output of a reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory {
    /// Parent step the chain started from (0 for an empty chain).
    pub start_t: usize,
    /// `x` before the first step and after every step, when recorded.
    pub states: Option<Vec<Tensor>>,
    pub final_x: Tensor,
    /// Reverse updates executed, i.e. model evaluations per chain.
    pub steps_executed: usize,
}

fn run_chunk(
    model: &dyn EpsilonModel,
    mut x: Tensor,
    start: usize,
    view: &dyn StepTable,
    cfg: &SamplerConfig,
    rngs: &mut [StreamRng],
) -> Result<(Tensor, Option<Vec<Tensor>>)> {
    let mut states = cfg.record_trajectory.then(|| vec![x.clone()]);
    for pos in (1..=start).rev() {
        let dim = x.dims2()?.1;
        let z = (pos > 1 && cfg.draws_noise()).then(|| chain_noise(rngs, dim));
        x = reverse_step_with_noise(model, &x, pos, view, cfg, z.as_ref())?;
        if let Some(s) = states.as_mut() {
            s.push(x.clone());
        }
    }
    if cfg.clip_output {
        x = x.map(|v| v.clamp(-1.0, 1.0));
    }
    Ok((x, states))
}

/// Runs chains from view position `start` down to 1, splitting rows across
/// `cfg.threads` workers.
fn run(
    model: &dyn EpsilonModel,
    x: Tensor,
    start: usize,
    view: &dyn StepTable,
    cfg: &SamplerConfig,
    mut rngs: Vec<StreamRng>,
) -> Result<SampleTrajectory> {
    let (rows, dim) = x.dims2()?;
    let start_t = if start == 0 { 0 } else { view.step(start) };
    let threads = cfg.threads.max(1).min(rows.max(1));
    let (final_x, states) = if threads == 1 {
        run_chunk(model, x, start, view, cfg, &mut rngs)?
    } else {
        let chunk = rows.div_ceil(threads);
        let parts: Vec<(Tensor, &mut [StreamRng])> = rngs
            .chunks_mut(chunk)
            .enumerate()
            .map(|(k, r)| {
                let lo = k * chunk;
                let x_part = Tensor::from_vec([r.len(), dim], x.data()[lo * dim..(lo + r.len()) * dim].to_vec())
                    .expect("chunk shape");
                (x_part, r)
            })
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let results: Vec<Result<(Tensor, Option<Vec<Tensor>>)>> = pool.install(|| {
            parts
                .into_par_iter()
                .map(|(xp, r)| run_chunk(model, xp, start, view, cfg, r))
                .collect()
        });
        let results: Vec<(Tensor, Option<Vec<Tensor>>)> = results.into_iter().collect::<Result<_>>()?;
        let stack = |parts: Vec<&Tensor>| -> Tensor {
            let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
            Tensor::from_vec([rows, dim], data).expect("stacked shape")
        };
        let final_x = stack(results.iter().map(|r| &r.0).collect());
        let states = cfg.record_trajectory.then(|| {
            (0..=start)
                .map(|k| stack(results.iter().map(|r| &r.1.as_ref().unwrap()[k]).collect()))
                .collect()
        });
        (final_x, states)
    };
    Ok(SampleTrajectory {
        start_t,
        states,
        final_x,
        steps_executed: start,
    })
}

pub(crate) fn chain_streams(seed: u64, label: &str, n: usize) -> Vec<StreamRng> {
    (0..n as u64).map(|i| indexed_stream(seed, label, i)).collect()
}

/// Generates `n` samples: `x_T ~ N(0, I)` per chain, then the full reverse
/// chain over the view.
pub fn sample(
    model: &dyn EpsilonModel,
    n: usize,
    view: &dyn StepTable,
    cfg: &SamplerConfig,
) -> Result<SampleTrajectory> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut rngs = chain_streams(cfg.seed, "sample/chain", n);
    let x_t = chain_noise(&mut rngs, model.data_dim());
    run(model, x_t, view.len(), view, cfg, rngs)
}

/// Runs the reverse chain from a given `x_t` at parent step `t`; `t = 0`
/// returns the input unchanged.
pub fn reverse_from(
    model: &dyn EpsilonModel,
    x_t: &Tensor,
    t: usize,
    view: &dyn StepTable,
    cfg: &SamplerConfig,
) -> Result<SampleTrajectory> {
    cfg.validate()?;
    let rows = x_t.dims2()?.0;
    let start = if t == 0 {
        0
    } else {
        view.position_of(t)
            .ok_or_else(|| Error::InvalidArgument(format!("step {t} is not in the sampling schedule")))?
    };
    let rngs = chain_streams(cfg.seed, "sample/from", rows);
    run(model, x_t.clone(), start, view, cfg, rngs)
}

/// Files written by [`write_dump`].
#[derive(Debug, Clone, Default)]
pub struct DumpFiles {
    pub tensor: PathBuf,
    pub csv: Option<PathBuf>,
    pub pgm: Option<PathBuf>,
}

/// Raw tensor file, plus a point CSV for 2-D data or a PGM grid for images.
pub fn write_dump(dir: &Path, stem: &str, samples: &Tensor, image_shape: Option<(usize, usize)>) -> Result<DumpFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = DumpFiles {
        tensor: dir.join(format!("{stem}.bin")),
        ..DumpFiles::default()
    };
    samples.save(&files.tensor)?;
    let dim = samples.dims2()?.1;
    if dim == 2 {
        let p = dir.join(format!("{stem}.csv"));
        write_points_csv(&p, samples)?;
        files.csv = Some(p);
    }
    if let Some((r, c)) = image_shape {
        let p = dir.join(format!("{stem}.pgm"));
        let n = samples.dims2()?.0;
        write_pgm_grid(&p, samples, r, c, (n as f64).sqrt().ceil() as usize)?;
        files.pgm = Some(p);
    }
    Ok(files)
}
