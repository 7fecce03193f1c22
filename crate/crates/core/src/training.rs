//! Training objectives, optimizer, EMA and the training loop.
//!
//! Noise for a batch comes from four independent streams derived from the
//! master seed and consumed in a fixed order: data indices, steps `t`, `eps`,
//! then `xi` (input-perturbation mode only). Every mode draws its `t` and
//! `eps` identically, so with `gamma = 0` the perturbed objectives reproduce
//! the standard one bit for bit, across whole training runs.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{jacobian_frobenius_sq, jacobian_frobenius_sq_probe, Tape, DEFAULT_JACOBIAN_BUDGET};
use crate::data::{csv_error, Dataset, DatasetSpec};
use crate::denoiser::{Denoiser, EpsilonModel, Mlp, MlpSpec};
use crate::error::{Error, Result};
use crate::forward::{q_sample_batch, q_sample_perturbed_batch, q_sample_scaled_batch};
use crate::rng::{stream, StreamRng};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::{load_all, save_all, DType, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Standard,
    /// Perturbed input, original noise as target.
    Ip,
    /// Variance-matched input, its own noise as target.
    DdpmY,
    /// Standard loss plus a Jacobian Frobenius penalty.
    Gp,
    /// Standard loss plus a squared weight-matrix norm.
    Wd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Ip => "ip",
            Mode::DdpmY => "ddpm_y",
            Mode::Gp => "gp",
            Mode::Wd => "wd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub gamma: f64,
    pub lambda_gp: f64,
    pub lambda_wd: f64,
    /// Probe count for the estimated Jacobian penalty; 0 means exact.
    pub gp_probes: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled optimizer decay, independent of the `wd` objective.
    pub weight_decay: f64,
    pub ema_rate: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub seed: u64,
    /// 0 writes only the initial and final checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables the periodic evaluation column.
    pub eval_every: u64,
    pub eval_batch: usize,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Standard,
            gamma: 0.1,
            lambda_gp: 1e-6,
            lambda_wd: 0.03,
            gp_probes: 0,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            ema_rate: 0.9999,
            batch_size: 128,
            total_iters: 2000,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            eval_batch: 1024,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0) || !(self.lambda_gp >= 0.0) || !(self.lambda_wd >= 0.0) {
            return bad("gamma and lambda weights must be >= 0".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("lr must be > 0 and adam betas in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad(format!("ema_rate {} outside [0, 1)", self.ema_rate));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            mode: self.mode,
            gamma: self.gamma,
            lambda_gp: self.lambda_gp,
            lambda_wd: self.lambda_wd,
            gp_probes: self.gp_probes,
        }
    }
}

/// The loss-defining subset of [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mode: Mode,
    pub gamma: f64,
    pub lambda_gp: f64,
    pub lambda_wd: f64,
    pub gp_probes: usize,
}

impl Objective {
    pub fn new(mode: Mode) -> Self {
        TrainConfig { mode, ..TrainConfig::default() }.objective()
    }
}

/// Independent streams for one training run.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    pub data: StreamRng,
    pub t: StreamRng,
    pub eps: StreamRng,
    pub xi: StreamRng,
    pub probe: StreamRng,
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: stream(seed, "train/data"),
            t: stream(seed, "train/t"),
            eps: stream(seed, "train/eps"),
            xi: stream(seed, "train/xi"),
            probe: stream(seed, "train/probe"),
        }
    }
}

/// One minibatch with its network input and regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub steps: Vec<usize>,
    /// The `eps` draw; `eps'` in `ddpm_y` mode.
    pub eps: Tensor,
    pub xi: Option<Tensor>,
    pub input: Tensor,
    pub target: Tensor,
}

/// Draws `t`, `eps` and (in `ip` mode) `xi` for `x0` and assembles the
/// input/target pair of `mode`.
pub fn make_batch(
    x0: &Tensor,
    mode: Mode,
    gamma: f64,
    streams: &mut NoiseStreams,
    schedule: &NoiseSchedule,
) -> Result<Batch> {
    let (rows, _) = x0.dims2()?;
    if rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let big_t = schedule.steps();
    let steps: Vec<usize> = (0..rows).map(|_| streams.t.random_range(1..=big_t)).collect();
    let eps = Tensor::randn(x0.shape(), &mut streams.eps);
    let (input, xi) = match mode {
        Mode::Ip => {
            let xi = Tensor::randn(x0.shape(), &mut streams.xi);
            (q_sample_perturbed_batch(x0, &steps, &eps, &xi, gamma, schedule)?, Some(xi))
        }
        Mode::DdpmY => (q_sample_scaled_batch(x0, &steps, &eps, gamma, schedule)?, None),
        Mode::Standard | Mode::Gp | Mode::Wd => (q_sample_batch(x0, &steps, &eps, schedule)?, None),
    };
    // The target is the eps draw in every mode; xi never reaches it.
    let target = eps.clone();
    Ok(Batch {
        x0: x0.clone(),
        steps,
        eps,
        xi,
        input,
        target,
    })
}

/// Per-element mean squared error of any model on a prepared batch.
pub fn regression_loss(model: &impl EpsilonModel, batch: &Batch, schedule: &NoiseSchedule) -> Result<f64> {
    let pred = model.predict_steps(&batch.input, &batch.steps, schedule)?;
    Ok(pred.sub(&batch.target)?.square().sum().item()? / batch.target.numel() as f64)
}

/// Value and (optionally) parameter gradients of one objective.
#[derive(Debug, Clone)]
pub struct LossEval<R: Real> {
    pub loss: f64,
    pub regression: f64,
    pub penalty: f64,
    pub grads: Option<Vec<Tensor<R>>>,
}

/// Evaluates `obj` for `model` on `batch`. Penalties with a zero weight are
/// skipped entirely, so they leave the standard loss untouched.
pub fn evaluate<R: Real>(
    model: &Mlp<R>,
    batch: &Batch,
    obj: &Objective,
    probe_rng: &mut StreamRng,
    want_grads: bool,
) -> Result<LossEval<R>> {
    let tape = Tape::<R>::new();
    let params = model.tape_params(&tape);
    let x = batch.input.cast::<R>();
    let target = tape.constant(batch.target.cast::<R>());
    let emb = tape.constant(model.spec().embedding.embed_batch::<R>(&batch.steps));

    let mut pred = None;
    let mut penalty = None;
    if obj.mode == Mode::Gp && obj.lambda_gp > 0.0 {
        let fwd = |xv| {
            let y = model.forward(&params, xv, emb)?;
            pred = Some(y);
            Ok(y)
        };
        let j = if obj.gp_probes == 0 {
            jacobian_frobenius_sq(&tape, &x, fwd, DEFAULT_JACOBIAN_BUDGET)?
        } else {
            jacobian_frobenius_sq_probe(&tape, &x, fwd, obj.gp_probes, probe_rng)?
        };
        penalty = Some(j.scale(R::from_f64c(obj.lambda_gp)));
    }
    if obj.mode == Mode::Wd && obj.lambda_wd > 0.0 {
        let mut acc: Option<crate::autodiff::Var<R>> = None;
        for (i, p) in params.iter().enumerate() {
            if Mlp::<R>::is_weight(i) {
                let s = p.square().sum();
                acc = Some(match acc {
                    Some(a) => a.add(s)?,
                    None => s,
                });
            }
        }
        penalty = acc.map(|a| a.scale(R::from_f64c(obj.lambda_wd)));
    }
    let pred = match pred {
        Some(p) => p,
        None => model.forward(&params, tape.constant(x), emb)?,
    };
    let regression = pred.sub(target)?.square().mean();
    let total = match penalty {
        Some(p) => regression.add(p)?,
        None => regression,
    };
    let grads = if want_grads {
        let g = tape.backward(total)?;
        Some(params.iter().map(|p| g.wrt(*p)).collect())
    } else {
        None
    };
    let loss = total.value().item()?.as_f64();
    let regression = regression.value().item()?.as_f64();
    Ok(LossEval {
        loss,
        regression,
        penalty: loss - regression,
        grads,
    })
}

fn objective_value<R: Real>(
    model: &Mlp<R>,
    x0: &Tensor,
    streams: &mut NoiseStreams,
    schedule: &NoiseSchedule,
    obj: Objective,
) -> Result<f64> {
    let batch = make_batch(x0, obj.mode, obj.gamma, streams, schedule)?;
    Ok(evaluate(model, &batch, &obj, &mut streams.probe, false)?.loss)
}

pub fn loss_standard<R: Real>(model: &Mlp<R>, x0: &Tensor, streams: &mut NoiseStreams, schedule: &NoiseSchedule) -> Result<f64> {
    objective_value(model, x0, streams, schedule, Objective::new(Mode::Standard))
}

pub fn loss_ip<R: Real>(
    model: &Mlp<R>,
    x0: &Tensor,
    streams: &mut NoiseStreams,
    schedule: &NoiseSchedule,
    gamma: f64,
) -> Result<f64> {
    objective_value(model, x0, streams, schedule, Objective { gamma, ..Objective::new(Mode::Ip) })
}

pub fn loss_ddpm_y<R: Real>(
    model: &Mlp<R>,
    x0: &Tensor,
    streams: &mut NoiseStreams,
    schedule: &NoiseSchedule,
    gamma: f64,
) -> Result<f64> {
    objective_value(model, x0, streams, schedule, Objective { gamma, ..Objective::new(Mode::DdpmY) })
}

pub fn loss_gp<R: Real>(
    model: &Mlp<R>,
    x0: &Tensor,
    streams: &mut NoiseStreams,
    schedule: &NoiseSchedule,
    lambda_gp: f64,
) -> Result<f64> {
    objective_value(model, x0, streams, schedule, Objective { lambda_gp, ..Objective::new(Mode::Gp) })
}

pub fn loss_wd<R: Real>(
    model: &Mlp<R>,
    x0: &Tensor,
    streams: &mut NoiseStreams,
    schedule: &NoiseSchedule,
    lambda_wd: f64,
) -> Result<f64> {
    objective_value(model, x0, streams, schedule, Objective { lambda_wd, ..Objective::new(Mode::Wd) })
}

/// Adaptive-moment optimizer with bias correction and decoupled decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<R: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub steps: u64,
}

impl<R: Real> AdamW<R> {
    pub fn new(params: &[Tensor<R>], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    /// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [Tensor<R>], grads: &[Tensor<R>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at optimizer step {}",
                    self.steps + 1
                )));
            }
        }
        self.steps += 1;
        let r = |v: f64| R::from_f64c(v);
        let (b1, b2) = (r(self.beta1), r(self.beta2));
        let bc1 = r(1.0 - self.beta1.powf(self.steps as f64));
        let bc2 = r(1.0 - self.beta2.powf(self.steps as f64));
        let (lr, eps) = (r(self.lr), r(self.eps));
        let decay = r(1.0 - self.lr * self.weight_decay);
        let one = R::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = g.data()[j];
                md[j] = b1 * md[j] + (one - b1) * gj;
                vd[j] = b2 * vd[j] + (one - b2) * gj * gj;
                let mh = md[j] / bc1;
                let vh = vd[j] / bc2;
                pd[j] = pd[j] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `ema <- rate * ema + (1 - rate) * theta`.
pub fn ema_update<R: Real>(ema: &mut [Tensor<R>], params: &[Tensor<R>], rate: f64) {
    let (r, s) = (R::from_f64c(rate), R::from_f64c(1.0 - rate));
    for (e, p) in ema.iter_mut().zip(params) {
        for (ev, pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = r * *ev + s * *pv;
        }
    }
}

pub const LOSS_HISTORY: usize = 1000;

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainerState<R: Real> {
    pub model: Mlp<R>,
    pub ema: Mlp<R>,
    pub optimizer: AdamW<R>,
    pub iter: u64,
    pub streams: NoiseStreams,
    /// Most recent losses, oldest first.
    pub losses: VecDeque<f64>,
}

impl<R: Real> TrainerState<R> {
    pub fn new(spec: &MlpSpec, cfg: &TrainConfig) -> Result<Self> {
        let model = Mlp::<R>::init(spec, cfg.seed)?;
        Ok(Self {
            ema: model.clone(),
            optimizer: AdamW::new(model.params(), cfg),
            model,
            iter: 0,
            streams: NoiseStreams::new(cfg.seed),
            losses: VecDeque::with_capacity(LOSS_HISTORY),
        })
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn step(&mut self, data: &Dataset, schedule: &NoiseSchedule, cfg: &TrainConfig) -> Result<StepStats> {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| self.streams.data.random_range(0..data.len()))
            .collect();
        let x0 = data.batch(&idx);
        let batch = make_batch(&x0, cfg.mode, cfg.gamma, &mut self.streams, schedule)?;
        let eval = evaluate(&self.model, &batch, &cfg.objective(), &mut self.streams.probe, true)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {} at iteration {}", eval.loss, self.iter + 1)));
        }
        let grads = eval.grads.expect("gradients requested");
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data().iter().map(|v| v.as_f64().powi(2)))
            .sum::<f64>()
            .sqrt();
        self.optimizer.step(self.model.params_mut(), &grads)?;
        ema_update(self.ema.params_mut(), self.model.params(), cfg.ema_rate);
        self.iter += 1;
        if self.losses.len() == LOSS_HISTORY {
            self.losses.pop_front();
        }
        self.losses.push_back(eval.loss);
        Ok(StepStats {
            loss: eval.loss,
            grad_norm,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Metadata stored next to checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub architecture: MlpSpec,
    pub schedule: ScheduleSpec,
    pub mode: Mode,
    pub gamma: f64,
    pub step: u64,
    pub dtype: DType,
    pub ema_rate: f64,
    pub seed: u64,
    pub dataset: Option<DatasetSpec>,
    pub dataset_scale: f64,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.toml";
pub const CHECKPOINT_PARAMS: &str = "params.bin";
pub const CHECKPOINT_EMA: &str = "ema.bin";

pub fn checkpoint_dir_name(step: u64) -> String {
    format!("checkpoint-{step:08}")
}

pub fn save_checkpoint<R: Real>(dir: &Path, manifest: &CheckpointManifest, model: &Mlp<R>, ema: &Mlp<R>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    save_all(dir.join(CHECKPOINT_PARAMS), model.params())?;
    save_all(dir.join(CHECKPOINT_EMA), ema.params())
}

/// A restored checkpoint with raw and EMA weights.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Denoiser,
    pub ema: Denoiser,
}

impl Checkpoint {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let load = |name: &str| -> Result<Denoiser> {
            let p = dir.join(name);
            Ok(match manifest.dtype {
                DType::F32 => Denoiser::MlpF32(Mlp::from_params(&manifest.architecture, load_all::<f32>(&p)?)?),
                DType::F64 => Denoiser::MlpF64(Mlp::from_params(&manifest.architecture, load_all::<f64>(&p)?)?),
            })
        };
        Ok(Self {
            params: load(CHECKPOINT_PARAMS)?,
            ema: load(CHECKPOINT_EMA)?,
            manifest,
        })
    }

    pub fn model(&self, use_ema: bool) -> &Denoiser {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }
}

/// Where and how often [`train`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
    pub dataset: Option<DatasetSpec>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: [&str; 6] = ["iter", "wall_ms", "loss", "grad_norm", "weight_frobenius", "eval_loss"];

/// Result of [`train`]: final state plus the checkpoint directories written.
#[derive(Debug)]
pub struct TrainRun<R: Real> {
    pub state: TrainerState<R>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `cfg.total_iters` optimizer steps. With `out`, writes a CSV log and
/// checkpoints at step 0, every `checkpoint_every` steps, and at the end.
pub fn train<R: Real>(
    data: &Dataset,
    schedule_spec: &ScheduleSpec,
    spec: &MlpSpec,
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
) -> Result<TrainRun<R>> {
    cfg.validate()?;
    spec.validate()?;
    if R::DTYPE != cfg.dtype {
        return Err(Error::Config(format!(
            "trainer instantiated for {:?} but config asks for {:?}",
            R::DTYPE,
            cfg.dtype
        )));
    }
    if data.dim() != spec.data_dim {
        return Err(Error::Config(format!(
            "dataset dim {} != model data dim {}",
            data.dim(),
            spec.data_dim
        )));
    }
    let schedule = schedule_spec.build()?;
    let mut state = TrainerState::<R>::new(spec, cfg)?;
    let started = Instant::now();

    // Fixed evaluation batch, drawn from its own stream.
    let eval_batch = if cfg.eval_every > 0 {
        let mut s = NoiseStreams::new(crate::rng::derive_seed(cfg.seed, "train/eval"));
        let idx: Vec<usize> = (0..cfg.eval_batch).map(|_| s.data.random_range(0..data.len())).collect();
        Some(make_batch(&data.batch(&idx), Mode::Standard, 0.0, &mut s, &schedule)?)
    } else {
        None
    };

    let manifest = |step: u64| CheckpointManifest {
        architecture: spec.clone(),
        schedule: schedule_spec.clone(),
        mode: cfg.mode,
        gamma: cfg.gamma,
        step,
        dtype: cfg.dtype,
        ema_rate: cfg.ema_rate,
        seed: cfg.seed,
        dataset: out.and_then(|o| o.dataset.clone()),
        dataset_scale: data.scale,
    };
    let mut checkpoints = Vec::new();
    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.dir.join(LOG_FILE);
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
            w.write_record(LOG_HEADER).map_err(|e| csv_error(&path, e))?;
            let dir = o.dir.join(checkpoint_dir_name(0));
            save_checkpoint(&dir, &manifest(0), &state.model, &state.ema)?;
            checkpoints.push(dir);
            Some((w, path))
        }
        None => None,
    };

    while state.iter < cfg.total_iters {
        let stats = state.step(data, &schedule, cfg)?;
        let it = state.iter;
        let eval_loss = match &eval_batch {
            Some(b) if it % cfg.eval_every == 0 || it == cfg.total_iters => {
                Some(regression_loss(&state.ema, b, &schedule)?)
            }
            _ => None,
        };
        if let Some((w, path)) = log.as_mut() {
            let row = [
                it.to_string(),
                started.elapsed().as_millis().to_string(),
                format!("{:e}", stats.loss),
                format!("{:e}", stats.grad_norm),
                format!("{:e}", state.model.weight_frobenius_sq().sqrt()),
                eval_loss.map(|v| format!("{v:e}")).unwrap_or_default(),
            ];
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        let due = cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0;
        if let Some(o) = out {
            if due || it == cfg.total_iters {
                let dir = o.dir.join(checkpoint_dir_name(it));
                save_checkpoint(&dir, &manifest(it), &state.model, &state.ema)?;
                checkpoints.push(dir);
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainRun { state, checkpoints })
}
