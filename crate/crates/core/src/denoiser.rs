//! Noise-prediction models.
//!
//! [`Mlp`] is the learnable time-conditioned network; [`AnalyticGaussian`] is
//! the exact conditional mean `E[eps | x_t]` for Gaussian data and serves as a
//! training-free oracle for sampler checks. Both implement [`EpsilonModel`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal embedding `[cos(t f_k) .. , sin(t f_k) ..]` with
/// `f_k = max_period^(-k / (dim/2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeEmbedding {
    pub dim: usize,
    #[serde(default = "default_max_period")]
    pub max_period: f64,
}

fn default_max_period() -> f64 {
    DEFAULT_MAX_PERIOD
}

impl TimeEmbedding {
    pub fn new(dim: usize, max_period: f64) -> Result<Self> {
        let e = Self { dim, max_period };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim must be even and positive, got {}",
                self.dim
            )));
        }
        if !(self.max_period > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "max_period must exceed 1, got {}",
                self.max_period
            )));
        }
        Ok(())
    }

    pub fn embed(&self, t: usize) -> Vec<f64> {
        let half = self.dim / 2;
        let t = t as f64;
        let freqs = (0..half).map(|k| (-self.max_period.ln() * k as f64 / half as f64).exp());
        let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).cos(), (t * f).sin())).unzip();
        cos.into_iter().chain(sin).collect()
    }

    /// `steps.len() x dim` matrix, one embedded step per row.
    pub fn embed_batch<R: Real>(&self, steps: &[usize]) -> Tensor<R> {
        let data = steps
            .iter()
            .flat_map(|&t| self.embed(t))
            .map(R::from_f64c)
            .collect();
        Tensor::from_vec([steps.len(), self.dim], data).expect("embedding shape")
    }
}

/// Network shape: input `data_dim + embedding.dim`, hidden layers, output
/// `data_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding: TimeEmbedding,
}

impl MlpSpec {
    /// 4 hidden layers of 256 units, 64-dim time embedding.
    pub fn default_for(data_dim: usize) -> Self {
        Self {
            data_dim,
            hidden: vec![256; 4],
            embedding: TimeEmbedding {
                dim: 64,
                max_period: DEFAULT_MAX_PERIOD,
            },
        }
    }

    /// Builds a spec from the full width list `[in, hidden.., out]`.
    pub fn from_layer_sizes(sizes: &[usize], embedding: TimeEmbedding) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output widths".into()));
        }
        let out = *sizes.last().unwrap();
        if sizes[0] != out + embedding.dim {
            return Err(Error::InvalidArgument(format!(
                "input width {} != data dim {out} + embedding dim {}",
                sizes[0], embedding.dim
            )));
        }
        let spec = Self {
            data_dim: out,
            hidden: sizes[1..sizes.len() - 1].to_vec(),
            embedding,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.data_dim + self.embedding.dim];
        sizes.extend(&self.hidden);
        sizes.push(self.data_dim);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if self.data_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-width layer in {:?}", self.layer_sizes())));
        }
        Ok(())
    }
}

/// Time-conditioned MLP with SiLU activations. Parameters are stored as
/// `[W_0, b_0, W_1, b_1, ..]` with `W_i: in x out` and `b_i: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<R: Real = f32> {
    spec: MlpSpec,
    params: Vec<Tensor<R>>,
}

impl<R: Real> Mlp<R> {
    /// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(seed, "init/mlp");
        let sizes = spec.layer_sizes();
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| R::from_f64c(rng.random_range(-bound..bound)))
                .collect();
            params.push(Tensor::from_vec([fan_in, fan_out], data)?.with_requires_grad(true));
            params.push(Tensor::zeros([1, fan_out]).with_requires_grad(true));
        }
        Ok(Self { spec: spec.clone(), params })
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_params(spec: &MlpSpec, params: Vec<Tensor<R>>) -> Result<Self> {
        spec.validate()?;
        let sizes = spec.layer_sizes();
        if params.len() != 2 * (sizes.len() - 1) {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                2 * (sizes.len() - 1),
                params.len()
            )));
        }
        for (i, w) in sizes.windows(2).enumerate() {
            let want = [[w[0], w[1]], [1, w[1]]];
            for (j, shape) in want.iter().enumerate() {
                let p = &params[2 * i + j];
                if p.shape() != shape {
                    return Err(Error::InvalidShape {
                        shape: p.shape().to_vec(),
                        msg: format!("parameter {} should be {shape:?}", 2 * i + j),
                    });
                }
            }
        }
        let params = params.into_iter().map(|p| p.with_requires_grad(true)).collect();
        Ok(Self { spec: spec.clone(), params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Weight matrices are the even-indexed parameters; biases are odd.
    pub fn is_weight(index: usize) -> bool {
        index % 2 == 0
    }

    /// `sum ||W_i||_F^2` over weight matrices only.
    pub fn weight_frobenius_sq(&self) -> f64 {
        self.params
            .iter()
            .enumerate()
            .filter(|(i, _)| Self::is_weight(*i))
            .map(|(_, w)| w.frobenius_sq().as_f64())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<S: Real>(&self) -> Mlp<S> {
        Mlp {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.cast::<S>().with_requires_grad(true)).collect(),
        }
    }

    /// Records every parameter on `tape`, in storage order.
    pub fn tape_params<'t>(&self, tape: &'t Tape<R>) -> Vec<Var<'t, R>> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// Recorded forward pass on `x: batch x data_dim` with a precomputed
    /// embedding `emb: batch x embedding.dim`.
    pub fn forward<'t>(&self, params: &[Var<'t, R>], x: Var<'t, R>, emb: Var<'t, R>) -> Result<Var<'t, R>> {
        let mut h = x.concat_cols(emb)?;
        let layers = params.len() / 2;
        for i in 0..layers {
            h = h.matmul(params[2 * i])?.add_row(params[2 * i + 1])?;
            if i + 1 < layers {
                h = h.silu();
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass; performs the same kernels in the same order as
    /// [`forward`](Self::forward), so the results agree bit for bit.
    pub fn predict(&self, x: &Tensor<R>, steps: &[usize]) -> Result<Tensor<R>> {
        let (rows, cols) = x.dims2()?;
        if cols != self.spec.data_dim || rows != steps.len() {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                msg: format!(
                    "expected {} rows of width {}",
                    steps.len(),
                    self.spec.data_dim
                ),
            });
        }
        let emb = self.spec.embedding.embed_batch::<R>(steps);
        let mut h = x.concat_cols(&emb)?;
        let layers = self.params.len() / 2;
        for i in 0..layers {
            h = h
                .matmul(&self.params[2 * i])?
                .add(&self.params[2 * i + 1].broadcast_rows(rows)?)?;
            if i + 1 < layers {
                h = h.silu_n(0);
            }
        }
        Ok(h)
    }
}

/// Exact `E[eps | x_t]` when the data law is `N(mu0, sigma0_sq I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticGaussian {
    pub mu0: Vec<f64>,
    pub sigma0_sq: f64,
}

impl AnalyticGaussian {
    pub fn new(mu0: Vec<f64>, sigma0_sq: f64) -> Result<Self> {
        if mu0.is_empty() || !(sigma0_sq >= 0.0) || !sigma0_sq.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "analytic model needs a nonempty mean and sigma0^2 >= 0, got {sigma0_sq}"
            )));
        }
        Ok(Self { mu0, sigma0_sq })
    }

    /// `sqrt(1 - ab) (x - sqrt(ab) mu0) / (ab sigma0^2 + 1 - ab)`.
    pub fn eps_star(&self, x: f64, mu: f64, alpha_bar: f64) -> f64 {
        (1.0 - alpha_bar).sqrt() * (x - alpha_bar.sqrt() * mu) / (alpha_bar * self.sigma0_sq + 1.0 - alpha_bar)
    }
}

/// Anything that predicts the noise in a batch `x: n x d` where row `i` sits
/// at diffusion step `steps[i]` of `schedule`.
pub trait EpsilonModel: Sync {
    fn data_dim(&self) -> usize;

    fn predict_steps(&self, x: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor>;

    /// Every row at the same step `t`.
    fn predict_eps(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        let rows = if x.rank() == 2 { x.shape()[0] } else { 1 };
        self.predict_steps(x, &vec![t; rows], schedule)
    }
}

fn check_input(x: &Tensor, steps: &[usize], dim: usize, schedule: &NoiseSchedule) -> Result<()> {
    let (rows, cols) = x.dims2()?;
    if cols != dim || rows != steps.len() {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            msg: format!("expected {} rows of width {dim}", steps.len()),
        });
    }
    steps.iter().try_for_each(|&t| schedule.check_step(t))
}

impl<R: Real> EpsilonModel for Mlp<R> {
    fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    fn predict_steps(&self, x: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
        check_input(x, steps, self.spec.data_dim, schedule)?;
        Ok(self.predict(&x.cast::<R>(), steps)?.cast::<f64>())
    }
}

impl EpsilonModel for AnalyticGaussian {
    fn data_dim(&self) -> usize {
        self.mu0.len()
    }

    fn predict_steps(&self, x: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
        check_input(x, steps, self.mu0.len(), schedule)?;
        let d = self.mu0.len();
        let mut out = Vec::with_capacity(x.numel());
        for (i, &t) in steps.iter().enumerate() {
            let ab = schedule.alpha_bar(t);
            out.extend(x.row(i).iter().zip(&self.mu0).map(|(v, m)| self.eps_star(*v, *m, ab)));
        }
        Tensor::from_vec([steps.len(), d], out)
    }
}

/// Closed set of model variants, as restored from a checkpoint or built for
/// an oracle run.
#[derive(Debug, Clone)]
pub enum Denoiser {
    MlpF32(Mlp<f32>),
    MlpF64(Mlp<f64>),
    Analytic(AnalyticGaussian),
}

impl EpsilonModel for Denoiser {
    fn data_dim(&self) -> usize {
        match self {
            Denoiser::MlpF32(m) => m.data_dim(),
            Denoiser::MlpF64(m) => m.data_dim(),
            Denoiser::Analytic(m) => m.data_dim(),
        }
    }

    fn predict_steps(&self, x: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
        match self {
            Denoiser::MlpF32(m) => m.predict_steps(x, steps, schedule),
            Denoiser::MlpF64(m) => m.predict_steps(x, steps, schedule),
            Denoiser::Analytic(m) => m.predict_steps(x, steps, schedule),
        }
    }
}
