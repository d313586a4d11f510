//! Shared denoising-diffusion machinery: noise schedule, closed-form forward
//! noising, the noise-prediction objective and reverse-chain sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Variance of the noise injected by each ancestral step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Posterior variance `beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    #[default]
    Posterior,
    /// The forward-process variance `beta_t`.
    Beta,
}

/// Residual norm of the noise-prediction objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    #[default]
    SquaredL2,
    L1,
}

impl LossNorm {
    /// Mean per-element residual between `target` and `pred`.
    pub fn eval(self, target: &[f64], pred: &[f64]) -> f64 {
        let sum: f64 = match self {
            LossNorm::SquaredL2 => target.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum(),
            LossNorm::L1 => target.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum(),
        };
        sum / target.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub variance: VarianceMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            variance: VarianceMode::Posterior,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let mut s = make_linear_schedule(self.steps, self.beta_start, self.beta_end)?;
        s.variance = self.variance;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    config: ScheduleConfig,
    pub variance: VarianceMode,
}

/// Linear beta ramp from `beta_start` to `beta_end`, endpoints included.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|i| beta_start + span * i as f64).collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            variance: VarianceMode::Posterior,
        },
        variance: VarianceMode::Posterior,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
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

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            variance: self.variance,
            ..self.config
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// Variance of the noise added when stepping from `t` to `t - 1`.
    pub fn step_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        match self.variance {
            VarianceMode::Beta => self.betas[t],
            VarianceMode::Posterior => {
                self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
            }
        }
    }

    /// Descending timesteps visited by [`sample`] for a given stride.
    pub fn ladder(&self, stride: usize) -> Result<Vec<usize>> {
        if stride == 0 || self.steps() % stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "sampling stride {stride} must be >= 1 and divide {} steps",
                self.steps()
            )));
        }
        Ok((0..self.steps() / stride).rev().map(|k| k * stride).collect())
    }
}

/// One draw of the forward process, used to build training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape("q_sample", x0.len(), eps.len()));
    }
    let ab = sched.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Draws `t ~ U[0, T)` and `eps ~ N(0, I)` and noises `x0`.
pub fn draw_training_sample<R: Rng + ?Sized>(x0: &[f64], sched: &NoiseSchedule, rng: &mut R) -> DiffusionSample {
    let t = rng.gen_range(0..sched.steps());
    let eps = standard_normal(rng, x0.len());
    let x_t = q_sample(x0, t, &eps, sched).expect("t drawn in range and shapes equal");
    DiffusionSample { x_t, t, eps }
}

/// A noise predictor over a batch of states laid out as `shape` (leading
/// axis is the batch).
pub trait Denoiser {
    type Cond: ?Sized;

    fn predict_noise(&self, x_t: &[f64], shape: &[usize], t: usize, cond: &Self::Cond) -> Result<Vec<f64>>;
}

/// Adapts a closure `(x_t, shape, t) -> eps_hat` into a [`Denoiser`] that ignores its condition.
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], &[usize], usize) -> Vec<f64>,
{
    type Cond = ();

    fn predict_noise(&self, x_t: &[f64], shape: &[usize], t: usize, _cond: &()) -> Result<Vec<f64>> {
        Ok((self.0)(x_t, shape, t))
    }
}

/// One-sample estimate of the noise-prediction objective.
pub fn training_loss<D, R>(
    denoiser: &D,
    x0: &[f64],
    shape: &[usize],
    cond: &D::Cond,
    sched: &NoiseSchedule,
    norm: LossNorm,
    rng: &mut R,
) -> Result<f64>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let sample = draw_training_sample(x0, sched, rng);
    let pred = denoiser.predict_noise(&sample.x_t, shape, sample.t, cond)?;
    if pred.len() != x0.len() {
        return Err(Error::shape("denoiser output", x0.len(), pred.len()));
    }
    Ok(norm.eval(&sample.eps, &pred))
}

/// Clean-state estimate implied by a noise prediction.
pub fn predict_x0(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let ab = sched.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect()
}

/// Posterior mean of `x_{t-1}` given a noise prediction.
pub fn posterior_mean(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let inv_sqrt_alpha = 1.0 / sched.alphas[t].sqrt();
    let coef = sched.betas[t] / (1.0 - sched.alpha_bars[t]).sqrt();
    x_t.iter()
        .zip(eps_hat)
        .map(|(x, e)| inv_sqrt_alpha * (x - coef * e))
        .collect()
}

/// One ancestral step `x_t -> x_{t-1}`; no noise is added at `t = 0`.
pub fn p_sample_step<D, R>(
    denoiser: &D,
    x_t: &[f64],
    shape: &[usize],
    t: usize,
    cond: &D::Cond,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    sched.check_t(t)?;
    let eps_hat = denoiser.predict_noise(x_t, shape, t, cond)?;
    if eps_hat.len() != x_t.len() {
        return Err(Error::shape("denoiser output", x_t.len(), eps_hat.len()));
    }
    let mut mean = posterior_mean(x_t, &eps_hat, t, sched);
    if t > 0 {
        let sigma = sched.step_variance(t).sqrt();
        for m in mean.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *m += sigma * z;
        }
    }
    Ok(mean)
}

/// Deterministic strided update from `t` to `t_prev` (implicit sampler, eta = 0).
fn implicit_step(x_t: &[f64], eps_hat: &[f64], t: usize, t_prev: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let x0 = predict_x0(x_t, eps_hat, t, sched);
    let ab = sched.alpha_bars[t_prev];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps_hat).map(|(x, e)| a * x + b * e).collect()
}

/// Source of standard-normal noise for the reverse chain.
///
/// `fill` receives the whole batch buffer; implementations may split it into
/// per-item streams.
pub trait NoiseSource {
    fn fill(&mut self, out: &mut [f64]);
}

impl<R: Rng> NoiseSource for R {
    fn fill(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.sample(StandardNormal);
        }
    }
}

/// Per-item noise streams: item `i` of the batch draws only from `streams[i]`,
/// so results do not depend on how items are grouped into batches.
pub struct PerItemNoise<'a, R>(pub &'a mut [R]);

impl<R: Rng> NoiseSource for PerItemNoise<'_, R> {
    fn fill(&mut self, out: &mut [f64]) {
        let n = self.0.len();
        let per = out.len() / n;
        for (chunk, rng) in out.chunks_mut(per).zip(self.0.iter_mut()) {
            for v in chunk.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
    }
}

/// Full reverse chain from `x_T ~ N(0, I)` down to `t = 0`.
///
/// `stride = 1` is exact ancestral sampling; larger strides take the
/// deterministic implicit update between ladder points.
pub fn sample<D, R>(
    denoiser: &D,
    shape: &[usize],
    cond: &D::Cond,
    sched: &NoiseSchedule,
    rng: &mut R,
    stride: usize,
) -> Result<Vec<f64>>
where
    D: Denoiser + ?Sized,
    R: Rng,
{
    sample_traced(denoiser, shape, cond, sched, rng, stride, |_, _| {})
}

/// [`sample`] with a per-item noise stream for every entry of the batch axis.
pub fn sample_per_item<D, R>(
    denoiser: &D,
    shape: &[usize],
    cond: &D::Cond,
    sched: &NoiseSchedule,
    streams: &mut [R],
    stride: usize,
) -> Result<Vec<f64>>
where
    D: Denoiser + ?Sized,
    R: Rng,
{
    if shape.first() != Some(&streams.len()) {
        return Err(Error::shape("noise streams", shape.first().copied().unwrap_or(0), streams.len()));
    }
    sample_traced(denoiser, shape, cond, sched, &mut PerItemNoise(streams), stride, |_, _| {})
}

/// [`sample`] that reports `(t, predicted x0)` after every denoiser call.
pub fn sample_traced<D, N>(
    denoiser: &D,
    shape: &[usize],
    cond: &D::Cond,
    sched: &NoiseSchedule,
    noise: &mut N,
    stride: usize,
    mut trace: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>>
where
    D: Denoiser + ?Sized,
    N: NoiseSource + ?Sized,
{
    let ladder = sched.ladder(stride)?;
    let n: usize = shape.iter().product();
    let mut x = vec![0.0; n];
    noise.fill(&mut x);
    let mut z = vec![0.0; n];
    for (k, &t) in ladder.iter().enumerate() {
        let eps_hat = denoiser.predict_noise(&x, shape, t, cond)?;
        if eps_hat.len() != n {
            return Err(Error::shape("denoiser output", n, eps_hat.len()));
        }
        trace(t, &predict_x0(&x, &eps_hat, t, sched));
        x = if stride == 1 {
            let mut mean = posterior_mean(&x, &eps_hat, t, sched);
            if t > 0 {
                let sigma = sched.step_variance(t).sqrt();
                noise.fill(&mut z);
                mean.iter_mut().zip(&z).for_each(|(m, z)| *m += sigma * z);
            }
            mean
        } else if let Some(&t_prev) = ladder.get(k + 1) {
            implicit_step(&x, &eps_hat, t, t_prev, sched)
        } else {
            predict_x0(&x, &eps_hat, t, sched)
        };
    }
    Ok(x)
}
