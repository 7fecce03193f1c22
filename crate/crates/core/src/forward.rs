//! Forward-process sampling: clean, perturbed and variance-matched noising,
//! plus the closed-form inversion used to read off a predicted clean sample.
//!
//! The batch variants apply a per-row step and share the elementwise kernels
//! with the single-step functions, so the two agree bit for bit.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// `alpha_bar` below this is treated as numerically degenerate when
/// dividing by `sqrt(alpha_bar)`.
pub const MIN_ALPHA_BAR: f64 = 1e-30;

fn check_same(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(())
}

fn signal_noise(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

#[inline]
fn mix(signal: f64, x0: f64, noise: f64, e: f64) -> f64 {
    signal * x0 + noise * e
}

#[inline]
fn perturbed(signal: f64, x0: f64, noise: f64, e: f64, gamma: f64, xi: f64) -> f64 {
    signal * x0 + noise * (e + gamma * xi)
}

/// One Markov step `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z`.
pub fn forward_step(x_prev: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor> {
    schedule.check_step(t)?;
    let b = schedule.beta(t);
    let (keep, add) = ((1.0 - b).sqrt(), b.sqrt());
    let data = x_prev
        .data()
        .iter()
        .map(|v| keep * v + add * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(x_prev.shape(), data)
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_same(x0, eps, "q_sample")?;
    let (s, n) = signal_noise(schedule, t)?;
    zip_map(x0, eps, |a, e| mix(s, a, n, e))
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) (eps + gamma xi)`.
pub fn q_sample_perturbed(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    xi: &Tensor,
    gamma: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    check_same(x0, eps, "q_sample_perturbed")?;
    check_same(x0, xi, "q_sample_perturbed")?;
    let (s, n) = signal_noise(schedule, t)?;
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .zip(xi.data())
        .map(|((a, e), x)| perturbed(s, *a, n, *e, gamma, *x))
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) sqrt(1 + gamma^2) eps'`:
/// the same marginal as the perturbed input, built from a single noise draw.
pub fn q_sample_scaled(
    x0: &Tensor,
    t: usize,
    eps_prime: &Tensor,
    gamma: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    check_same(x0, eps_prime, "q_sample_scaled")?;
    let (s, n) = signal_noise(schedule, t)?;
    let n = n * (1.0 + gamma * gamma).sqrt();
    zip_map(x0, eps_prime, |a, e| mix(s, a, n, e))
}

/// `(x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
pub fn predict_x0(xt: &Tensor, eps_hat: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_same(xt, eps_hat, "predict_x0")?;
    schedule.check_step(t)?;
    predict_x0_with(xt, eps_hat, schedule.alpha_bar(t))
}

pub(crate) fn predict_x0_with(xt: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if alpha_bar < MIN_ALPHA_BAR {
        return Err(Error::Degenerate(format!(
            "alpha_bar {alpha_bar:e} too small to invert"
        )));
    }
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    zip_map(xt, eps_hat, |x, e| (x - n * e) / s)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

fn check_rows(x0: &Tensor, steps: &[usize]) -> Result<usize> {
    let (rows, cols) = x0.dims2()?;
    if rows != steps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} steps for {rows} rows",
            steps.len()
        )));
    }
    Ok(cols)
}

/// Row-wise [`q_sample`]: row `i` uses step `steps[i]`.
pub fn q_sample_batch(x0: &Tensor, steps: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_same(x0, eps, "q_sample_batch")?;
    let cols = check_rows(x0, steps)?;
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in steps.iter().enumerate() {
        let (s, n) = signal_noise(schedule, t)?;
        let r = i * cols..(i + 1) * cols;
        out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(a, e)| mix(s, *a, n, *e)));
    }
    Tensor::from_vec(x0.shape(), out)
}

/// Row-wise [`q_sample_perturbed`].
pub fn q_sample_perturbed_batch(
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    xi: &Tensor,
    gamma: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    check_same(x0, eps, "q_sample_perturbed_batch")?;
    check_same(x0, xi, "q_sample_perturbed_batch")?;
    let cols = check_rows(x0, steps)?;
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in steps.iter().enumerate() {
        let (s, n) = signal_noise(schedule, t)?;
        let r = i * cols..(i + 1) * cols;
        out.extend(
            x0.data()[r.clone()]
                .iter()
                .zip(&eps.data()[r.clone()])
                .zip(&xi.data()[r])
                .map(|((a, e), x)| perturbed(s, *a, n, *e, gamma, *x)),
        );
    }
    Tensor::from_vec(x0.shape(), out)
}

/// Row-wise [`q_sample_scaled`].
pub fn q_sample_scaled_batch(
    x0: &Tensor,
    steps: &[usize],
    eps_prime: &Tensor,
    gamma: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    check_same(x0, eps_prime, "q_sample_scaled_batch")?;
    let cols = check_rows(x0, steps)?;
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in steps.iter().enumerate() {
        let (s, n) = signal_noise(schedule, t)?;
        let n = n * (1.0 + gamma * gamma).sqrt();
        let r = i * cols..(i + 1) * cols;
        out.extend(x0.data()[r.clone()].iter().zip(&eps_prime.data()[r]).map(|(a, e)| mix(s, *a, n, *e)));
    }
    Tensor::from_vec(x0.shape(), out)
}
