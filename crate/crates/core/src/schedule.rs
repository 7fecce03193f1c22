//! Noise schedules and respaced sub-schedules.
//!
//! Steps are 1-based throughout: `t` ranges over `1..=T` and `alpha_bar(0)`
//! is the empty product 1. Coefficient tables are always `f64`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    /// Built from an explicit beta table (e.g. a respaced schedule).
    Custom,
}

impl ScheduleKind {
    fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Custom => "custom",
        }
    }
}

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_BETA_CLIP: f64 = 0.999;

/// Serializable recipe for a [`NoiseSchedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_offset: f64,
    pub beta_clip: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            cosine_offset: DEFAULT_COSINE_OFFSET,
            beta_clip: DEFAULT_BETA_CLIP,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end),
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.steps, self.cosine_offset, self.beta_clip),
            ScheduleKind::Custom => Err(Error::Schedule("custom schedules are built from a beta table".into())),
        }
    }
}

/// Forward-process coefficients `beta_t`, `alpha_t`, `alpha_bar_t` and the
/// posterior variance `sigma_t^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds every derived table from `betas` and checks the invariants.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("at least one step is required".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.iter().any(|a| *a <= 0.0) {
            return Err(Error::Schedule("alpha_bar underflows to zero".into()));
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                posterior_variance(prev, alpha_bars[i], betas[i])
            })
            .collect();
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("T must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "linear endpoints must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (i as f64 / span) * (beta_end - beta_start))
                .collect()
        };
        Self::from_betas(ScheduleKind::Linear, betas)
    }

    /// `alpha_bar(t) = f(t)/f(0)` with `f(t) = cos^2(((t/T)+s)/(1+s) * pi/2)`,
    /// betas clipped at `beta_clip`.
    pub fn cosine(steps: usize, offset: f64, beta_clip: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("T must be positive".into()));
        }
        if !(offset >= 0.0 && beta_clip > 0.0 && beta_clip < 1.0) {
            return Err(Error::Schedule(format!(
                "cosine offset {offset} / clip {beta_clip} out of range"
            )));
        }
        let f = |t: f64| {
            let c = ((t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
            c * c
        };
        let betas = (1..=steps)
            .map(|t| {
                let ratio = f(t as f64) / f(t as f64 - 1.0);
                (1.0 - ratio).min(beta_clip)
            })
            .collect();
        Self::from_betas(ScheduleKind::Cosine, betas)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    /// Plain-text table, one row per step: `t beta alpha_bar posterior_var`.
    /// Values use the shortest representation that round-trips exactly.
    pub fn to_table(&self) -> String {
        let mut out = format!("# kind={} T={}\n# t beta alpha_bar posterior_var\n", self.kind.name(), self.steps());
        for t in 1..=self.steps() {
            let _ = writeln!(
                out,
                "{t} {:e} {:e} {:e}",
                self.beta(t),
                self.alpha_bar(t),
                self.posterior_var(t)
            );
        }
        out
    }

    /// Parses [`to_table`](Self::to_table) output. Only the beta column is
    /// authoritative; the others are checked for consistency.
    pub fn from_table(text: &str) -> Result<Self> {
        let mut kind = ScheduleKind::Custom;
        let mut betas = Vec::new();
        let mut listed = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(header) = line.strip_prefix('#') {
                for tok in header.split_whitespace() {
                    if let Some(k) = tok.strip_prefix("kind=") {
                        kind = match k {
                            "linear" => ScheduleKind::Linear,
                            "cosine" => ScheduleKind::Cosine,
                            _ => ScheduleKind::Custom,
                        };
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(Error::Schedule(format!("bad table row: {line}")));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Schedule(format!("bad number {s}: {e}")))
            };
            let t: usize = cols[0]
                .parse()
                .map_err(|e| Error::Schedule(format!("bad step {}: {e}", cols[0])))?;
            if t != betas.len() + 1 {
                return Err(Error::Schedule(format!("rows out of order at t={t}")));
            }
            betas.push(parse(cols[1])?);
            listed.push((parse(cols[2])?, parse(cols[3])?));
        }
        let schedule = Self::from_betas(kind, betas)?;
        for (t, (ab, pv)) in listed.into_iter().enumerate() {
            if ab != schedule.alpha_bars[t] || pv != schedule.posterior_vars[t] {
                return Err(Error::Schedule(format!("inconsistent derived columns at t={}", t + 1)));
            }
        }
        Ok(schedule)
    }

    /// Evenly strided subsequence of `T'` steps ending at `T`: step `i` is
    /// `ceil(i * T / T')`, so fractional positions resolve to the later step.
    pub fn respace(&self, target: usize) -> Result<RespacedSchedule> {
        let total = self.steps();
        if target == 0 || target > total {
            return Err(Error::Schedule(format!(
                "respaced length {target} must lie in 1..={total}"
            )));
        }
        let steps = (1..=target).map(|i| (i * total).div_ceil(target)).collect();
        RespacedSchedule::from_steps(self.clone(), steps)
    }
}

fn posterior_variance(alpha_bar_prev: f64, alpha_bar: f64, beta: f64) -> f64 {
    (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
}

/// A subsequence of a parent schedule's steps with effective coefficients
/// recomputed from the parent's `alpha_bar` ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct RespacedSchedule {
    parent: NoiseSchedule,
    steps: Vec<usize>,
    effective_betas: Vec<f64>,
    effective_alpha_bars: Vec<f64>,
    effective_posterior_vars: Vec<f64>,
}

impl RespacedSchedule {
    /// `steps` must be strictly increasing, within `1..=T`, and end at `T`.
    pub fn from_steps(parent: NoiseSchedule, steps: Vec<usize>) -> Result<Self> {
        let total = parent.steps();
        if steps.is_empty() || *steps.last().unwrap() != total {
            return Err(Error::Schedule("respaced steps must end at T".into()));
        }
        if steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule("respaced steps must be strictly increasing in 1..=T".into()));
        }
        let mut effective_betas = Vec::with_capacity(steps.len());
        let mut effective_alpha_bars = Vec::with_capacity(steps.len());
        let mut effective_posterior_vars = Vec::with_capacity(steps.len());
        let mut prev_step = 0;
        for &s in &steps {
            let ab = parent.alpha_bar(s);
            let ab_prev = parent.alpha_bar(prev_step);
            // Adjacent steps keep the parent's beta exactly.
            let beta = if s == prev_step + 1 {
                parent.beta(s)
            } else {
                1.0 - ab / ab_prev
            };
            effective_betas.push(beta);
            effective_alpha_bars.push(ab);
            effective_posterior_vars.push(posterior_variance(ab_prev, ab, beta));
            prev_step = s;
        }
        Ok(Self {
            parent,
            steps,
            effective_betas,
            effective_alpha_bars,
            effective_posterior_vars,
        })
    }

    pub fn parent(&self) -> &NoiseSchedule {
        &self.parent
    }

    /// Parent-step indices, strictly increasing, ending at `T`.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn effective_betas(&self) -> &[f64] {
        &self.effective_betas
    }

    pub fn effective_alpha_bars(&self) -> &[f64] {
        &self.effective_alpha_bars
    }

    pub fn effective_posterior_vars(&self) -> &[f64] {
        &self.effective_posterior_vars
    }

    /// The sub-schedule as a standalone schedule over steps `1..=T'`.
    pub fn as_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_betas(ScheduleKind::Custom, self.effective_betas.clone())
    }
}

/// Step-indexed coefficients as seen by a sampler. Position `i` runs over
/// `1..=len()`; `step(i)` is the parent-schedule step the model is
/// conditioned on.
pub trait StepTable: Sync {
    fn schedule(&self) -> &NoiseSchedule;
    fn len(&self) -> usize;
    fn step(&self, i: usize) -> usize;
    fn beta_at(&self, i: usize) -> f64;
    fn alpha_bar_at(&self, i: usize) -> f64;
    fn alpha_bar_prev_at(&self, i: usize) -> f64;
    fn posterior_var_at(&self, i: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position whose parent step equals `t`.
    fn position_of(&self, t: usize) -> Option<usize> {
        (1..=self.len()).find(|&i| self.step(i) == t)
    }
}

impl StepTable for NoiseSchedule {
    fn schedule(&self) -> &NoiseSchedule {
        self
    }
    fn len(&self) -> usize {
        self.steps()
    }
    fn step(&self, i: usize) -> usize {
        i
    }
    fn beta_at(&self, i: usize) -> f64 {
        self.beta(i)
    }
    fn alpha_bar_at(&self, i: usize) -> f64 {
        self.alpha_bar(i)
    }
    fn alpha_bar_prev_at(&self, i: usize) -> f64 {
        self.alpha_bar(i - 1)
    }
    fn posterior_var_at(&self, i: usize) -> f64 {
        self.posterior_var(i)
    }
    fn position_of(&self, t: usize) -> Option<usize> {
        (1..=self.steps()).contains(&t).then_some(t)
    }
}

impl StepTable for RespacedSchedule {
    fn schedule(&self) -> &NoiseSchedule {
        &self.parent
    }
    fn len(&self) -> usize {
        self.steps.len()
    }
    fn step(&self, i: usize) -> usize {
        self.steps[i - 1]
    }
    fn beta_at(&self, i: usize) -> f64 {
        self.effective_betas[i - 1]
    }
    fn alpha_bar_at(&self, i: usize) -> f64 {
        self.effective_alpha_bars[i - 1]
    }
    fn alpha_bar_prev_at(&self, i: usize) -> f64 {
        if i == 1 {
            1.0
        } else {
            self.effective_alpha_bars[i - 2]
        }
    }
    fn posterior_var_at(&self, i: usize) -> f64 {
        self.effective_posterior_vars[i - 1]
    }
    fn position_of(&self, t: usize) -> Option<usize> {
        self.steps.binary_search(&t).ok().map(|i| i + 1)
    }
}
