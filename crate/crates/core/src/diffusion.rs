//! Noise schedules, forward noising and the DDIM / Euler Ancestral samplers.
//!
//! Images are handled as flat `f64` slices; a batch is `n` images of
//! `height × width` laid out back to back (see [`Batch`]).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Batch;
use crate::rng;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `sqrt((1 - ab) / ab)`: the noise level of timestep `t` in sigma space.
    pub fn sigma(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        ((1.0 - ab) / ab).sqrt()
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Linear beta schedule from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule needs T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
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
    })
}

fn check_same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// `sqrt(ab_t)·x0 + sqrt(1 - ab_t)·noise`.
pub fn forward_noise(x0: &[f64], t: usize, noise: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_same_len(x0, noise, "forward_noise")?;
    let ab = *schedule
        .alpha_bars
        .get(t)
        .ok_or_else(|| Error::Config(format!("timestep {t} outside schedule of {}", schedule.len())))?;
    Ok(forward_noise_with(x0, ab, noise))
}

pub(crate) fn forward_noise_with(x0: &[f64], alpha_bar: f64, noise: &[f64]) -> Vec<f64> {
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(noise).map(|(x, e)| s * x + n * e).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    Trailing,
    Leading,
    Linspace,
}

impl FromStr for Spacing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trailing" => Ok(Spacing::Trailing),
            "leading" => Ok(Spacing::Leading),
            "linspace" => Ok(Spacing::Linspace),
            other => Err(Error::Config(format!("unknown timestep spacing {other:?}"))),
        }
    }
}

impl fmt::Display for Spacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Spacing::Trailing => "trailing",
            Spacing::Leading => "leading",
            Spacing::Linspace => "linspace",
        })
    }
}

/// Inference timesteps, strictly descending, all within `[0, T-1]`.
pub fn timestep_spacing(train_steps: usize, steps: usize, mode: Spacing) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::Config(format!(
            "inference steps {steps} must lie in 1..={train_steps}"
        )));
    }
    let (t, n) = (train_steps as f64, steps as f64);
    let mut out: Vec<usize> = match mode {
        Spacing::Trailing => (0..steps)
            .map(|k| ((t - k as f64 * t / n).round() as i64 - 1).max(0) as usize)
            .collect(),
        Spacing::Leading => (0..steps)
            .rev()
            .map(|k| (k as f64 * t / n).floor() as usize)
            .collect(),
        Spacing::Linspace => (0..steps)
            .rev()
            .map(|k| {
                if steps == 1 {
                    0
                } else {
                    (k as f64 * (t - 1.0) / (n - 1.0)).round() as usize
                }
            })
            .collect(),
    };
    if mode == Spacing::Linspace && steps == 1 {
        out = vec![train_steps - 1];
    }
    out.dedup();
    Ok(out)
}

/// One DDIM update between cumulative signal levels `ab_t` and `ab_prev`.
/// `z` supplies fresh standard normal noise and is only read when `eta > 0`.
pub fn ddim_update(
    x_t: &[f64],
    eps_hat: &[f64],
    ab_t: f64,
    ab_prev: f64,
    eta: f64,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_same_len(x_t, eps_hat, "ddim_step")?;
    if ab_t <= 0.0 {
        return Err(Error::Numerical("alpha_bar of the current step is zero".into()));
    }
    let sigma = if eta > 0.0 && ab_t < 1.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).max(0.0).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, sn, sp) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_prev.sqrt());
    let mut out: Vec<f64> = x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0 = (x - sn * e) / sa;
            sp * x0 + dir * e
        })
        .collect();
    if sigma > 0.0 {
        let z = z.ok_or_else(|| Error::Config("stochastic DDIM step needs noise".into()))?;
        check_same_len(x_t, z, "ddim_step noise")?;
        for (o, zi) in out.iter_mut().zip(z) {
            *o += sigma * zi;
        }
    }
    Ok(out)
}

/// DDIM step between training timesteps; `t_prev = None` steps to data
/// (`ab_prev = 1`).
pub fn ddim_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    schedule: &NoiseSchedule,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let ab_t = schedule.alpha_bars[t];
    let ab_prev = t_prev.map_or(1.0, |p| schedule.alpha_bars[p]);
    ddim_update(x_t, eps_hat, ab_t, ab_prev, eta, z)
}

/// Ancestral Euler step in sigma space, where `x` is the noisy sample
/// divided by `sqrt(ab_t)`.
pub fn euler_ancestral_step(
    x: &[f64],
    denoised: &[f64],
    sigma: f64,
    sigma_next: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    check_same_len(x, denoised, "euler_ancestral_step")?;
    if !(sigma > 0.0) || sigma_next < 0.0 || sigma_next > sigma {
        return Err(Error::Config(format!(
            "euler ancestral step needs sigma > 0 and 0 <= sigma_next <= sigma, got {sigma} -> {sigma_next}"
        )));
    }
    let sigma_up = if sigma_next == 0.0 {
        0.0
    } else {
        (sigma_next * sigma_next * (sigma * sigma - sigma_next * sigma_next) / (sigma * sigma)).sqrt()
    };
    let sigma_down = (sigma_next * sigma_next - sigma_up * sigma_up).max(0.0).sqrt();
    if sigma_next == 0.0 {
        // the drift term lands exactly on the denoised estimate
        return Ok(denoised.to_vec());
    }
    check_same_len(x, z, "euler_ancestral_step noise")?;
    Ok(x.iter()
        .zip(denoised)
        .zip(z)
        .map(|((xi, di), zi)| {
            let d = (xi - di) / sigma;
            xi + d * (sigma_down - sigma) + sigma_up * zi
        })
        .collect())
}

/// An epsilon-predicting denoiser over image batches.
pub trait Denoiser {
    /// Predicts the injected noise for every element of `x_t`, which holds
    /// `shape.n` images noised to timestep `t`.
    fn predict_epsilon(&self, x_t: &[f64], shape: (usize, usize, usize), t: usize) -> Vec<f64>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_epsilon(&self, x_t: &[f64], shape: (usize, usize, usize), t: usize) -> Vec<f64> {
        (**self).predict_epsilon(x_t, shape, t)
    }
}

/// Exact posterior-mean denoiser for an independent per-pixel `N(mu, sigma0²)` prior.
#[derive(Debug, Clone)]
pub struct AnalyticGaussian {
    pub mu: f64,
    pub sigma0: f64,
    alpha_bars: Vec<f64>,
}

pub fn analytic_gaussian_denoiser(mu: f64, sigma0: f64, schedule: &NoiseSchedule) -> Result<AnalyticGaussian> {
    if !(sigma0 > 0.0) {
        return Err(Error::Config("prior std must be positive".into()));
    }
    Ok(AnalyticGaussian {
        mu,
        sigma0,
        alpha_bars: schedule.alpha_bars.clone(),
    })
}

impl AnalyticGaussian {
    /// `E[x0 | x_t]` at cumulative signal level `ab`.
    pub fn posterior_mean(&self, x_t: f64, ab: f64) -> f64 {
        let v = self.sigma0 * self.sigma0;
        (ab.sqrt() * v * x_t + (1.0 - ab) * self.mu) / (ab * v + (1.0 - ab))
    }

    pub fn epsilon_at(&self, x_t: f64, ab: f64) -> f64 {
        (x_t - ab.sqrt() * self.posterior_mean(x_t, ab)) / (1.0 - ab).sqrt()
    }
}

impl Denoiser for AnalyticGaussian {
    fn predict_epsilon(&self, x_t: &[f64], _shape: (usize, usize, usize), t: usize) -> Vec<f64> {
        let ab = self.alpha_bars[t];
        x_t.iter().map(|&x| self.epsilon_at(x, ab)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddim,
    EulerAncestral,
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerKind::Ddim),
            "euler_ancestral" => Ok(SamplerKind::EulerAncestral),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::EulerAncestral => "euler_ancestral",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub spacing: Spacing,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::EulerAncestral,
            steps: 40,
            eta: 0.0,
            spacing: Spacing::Trailing,
        }
    }
}

/// Options for [`sample_with`]; [`sample`] uses the defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Clamp the final batch to `[0,1]`.
    pub clamp: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { clamp: true }
    }
}

/// Generates `shape = (n, height, width)` images from standard normal noise.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<Batch> {
    sample_with(denoiser, config, schedule, shape, seed, SampleOptions::default())
}

pub fn sample_with<D: Denoiser + ?Sized>(
    denoiser: &D,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    seed: u64,
    options: SampleOptions,
) -> Result<Batch> {
    if !(0.0..=1.0).contains(&config.eta) {
        return Err(Error::Config(format!("eta {} outside [0,1]", config.eta)));
    }
    let timesteps = timestep_spacing(schedule.len(), config.steps, config.spacing)?;
    let (n, h, w) = shape;
    let len = n * h * w;
    let mut noise_rng = rng::rng(seed);
    let mut x = rng::normals(&mut noise_rng, len);
    match config.kind {
        SamplerKind::Ddim => {
            for (i, &t) in timesteps.iter().enumerate() {
                let eps = denoiser.predict_epsilon(&x, shape, t);
                let z = (config.eta > 0.0).then(|| rng::normals(&mut noise_rng, len));
                x = ddim_step(&x, &eps, t, timesteps.get(i + 1).copied(), config.eta, schedule, z.as_deref())?;
            }
        }
        SamplerKind::EulerAncestral => {
            let sigmas: Vec<f64> = timesteps
                .iter()
                .map(|&t| schedule.sigma(t))
                .chain(std::iter::once(0.0))
                .collect();
            let scale = (sigmas[0] * sigmas[0] + 1.0).sqrt();
            for v in &mut x {
                *v *= scale;
            }
            for (i, &t) in timesteps.iter().enumerate() {
                let (sigma, sigma_next) = (sigmas[i], sigmas[i + 1]);
                let model_in_scale = 1.0 / (sigma * sigma + 1.0).sqrt();
                let x_in: Vec<f64> = x.iter().map(|v| v * model_in_scale).collect();
                let eps = denoiser.predict_epsilon(&x_in, shape, t);
                let denoised: Vec<f64> = x.iter().zip(&eps).map(|(xi, e)| xi - sigma * e).collect();
                let z = if sigma_next > 0.0 {
                    rng::normals(&mut noise_rng, len)
                } else {
                    Vec::new()
                };
                x = euler_ancestral_step(&x, &denoised, sigma, sigma_next, &z)?;
            }
        }
    }
    if options.clamp {
        for v in &mut x {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(Batch {
        n,
        height: h,
        width: w,
        data: x,
    })
}
