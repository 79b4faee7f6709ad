//! Noise schedules and the closed-form forward / ancestral reverse kernels.
//!
//! Storage is 0-based: index `t - 1` holds the value for timestep `t ∈ [1, T]`.
//! "Before any step" the cumulative product is 1.

use serde::{Deserialize, Serialize};

use crate::data::VideoTensor;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const MAX_BETA: f64 = 0.999;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine { offset: f64 },
    Linear { beta_start: f64, beta_end: f64 },
}

/// Parameters sufficient to rebuild a schedule bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    #[serde(flatten)]
    pub kind: ScheduleKind,
}

impl ScheduleSpec {
    pub fn cosine(timesteps: usize) -> Self {
        Self { timesteps, kind: ScheduleKind::Cosine { offset: DEFAULT_COSINE_OFFSET } }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Cosine { offset } => NoiseSchedule::cosine(self.timesteps, offset),
            ScheduleKind::Linear { beta_start, beta_end } => NoiseSchedule::linear(self.timesteps, beta_start, beta_end),
        }
    }
}

/// A diffusion timestep `t ∈ [1, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestep(usize);

impl Timestep {
    pub fn new(t: usize, total: usize) -> Result<Self> {
        if t == 0 || t > total {
            return Err(Error::invalid(format!("timestep {t} outside [1, {total}]")));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Arithmetic progression of betas from `beta_start` to `beta_end`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 1 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!("linear betas must satisfy 0 < {beta_start} <= {beta_end} < 1")));
        }
        let beta = (0..timesteps)
            .map(|i| if timesteps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64 })
            .collect();
        let spec = ScheduleSpec { timesteps, kind: ScheduleKind::Linear { beta_start, beta_end } };
        Ok(Self::from_betas(spec, beta))
    }

    /// `ᾱ_t = f(t)/f(0)`, `f(u) = cos²(((u/T + s)/(1 + s))·π/2)`, betas clipped at 0.999.
    pub fn cosine(timesteps: usize, offset: f64) -> Result<Self> {
        if timesteps < 1 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if offset.is_nan() || offset <= 0.0 {
            return Err(Error::invalid(format!("cosine offset must be positive, got {offset}")));
        }
        let f = |u: f64| {
            let angle = ((u / timesteps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            angle.cos().powi(2)
        };
        let f0 = f(0.0);
        let beta = (1..=timesteps)
            .map(|t| {
                let prev = f((t - 1) as f64) / f0;
                let cur = f(t as f64) / f0;
                (1.0 - cur / prev).clamp(f64::MIN_POSITIVE, MAX_BETA)
            })
            .collect();
        let spec = ScheduleSpec { timesteps, kind: ScheduleKind::Cosine { offset } };
        Ok(Self::from_betas(spec, beta))
    }

    fn from_betas(spec: ScheduleSpec, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { spec, beta, alpha, alpha_bar }
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: Timestep) -> f64 {
        self.beta[t.0 - 1]
    }

    pub fn alpha(&self, t: Timestep) -> f64 {
        self.alpha[t.0 - 1]
    }

    pub fn alpha_bar(&self, t: Timestep) -> f64 {
        self.alpha_bar[t.0 - 1]
    }

    pub fn timestep(&self, t: usize) -> Result<Timestep> {
        Timestep::new(t, self.timesteps())
    }

    fn check(&self, t: Timestep) -> Result<()> {
        if t.0 > self.timesteps() {
            return Err(Error::invalid(format!("timestep {} outside schedule of length {}", t.0, self.timesteps())));
        }
        Ok(())
    }

    /// Slice kernel behind [`forward_sample`]: `out = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn noise_into<T: Real>(&self, x0: &[T], eps: &[T], t: Timestep, out: &mut [T]) {
        let ab = self.alpha_bar(t);
        let a = T::from_f64c(ab.sqrt());
        let b = T::from_f64c((1.0 - ab).sqrt());
        for ((o, &x), &e) in out.iter_mut().zip(x0).zip(eps) {
            *o = a * x + b * e;
        }
    }

    /// Replaces `eps_hat` by the noise consistent with the predicted `x0` clamped to `[-1, 1]`.
    /// Elements whose prediction already lies in range are left untouched.
    pub fn clip_eps_into<T: Real>(&self, x_t: &[T], eps_hat: &mut [T], t: Timestep) {
        let ab = self.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (&x, e) in x_t.iter().zip(eps_hat.iter_mut()) {
            let (xf, ef) = (x.to_f64().unwrap_or(0.0), e.to_f64().unwrap_or(0.0));
            let x0 = (xf - sb * ef) / sa;
            if x0.abs() > 1.0 {
                *e = T::from_f64c((xf - sa * x0.clamp(-1.0, 1.0)) / sb);
            }
        }
    }

    /// Slice kernel behind [`reverse_step`]. `z` is ignored at `t = 1`.
    pub fn denoise_into<T: Real>(&self, x_t: &[T], eps_hat: &[T], z: &[T], t: Timestep, out: &mut [T]) {
        let beta = self.beta(t);
        let inv_sqrt_alpha = T::from_f64c(1.0 / self.alpha(t).sqrt());
        let eps_coef = T::from_f64c(beta / (1.0 - self.alpha_bar(t)).sqrt());
        let sigma = if t.0 == 1 { T::zero() } else { T::from_f64c(beta.sqrt()) };
        for (((o, &x), &e), &zz) in out.iter_mut().zip(x_t).zip(eps_hat).zip(z) {
            let mean = inv_sqrt_alpha * (x - eps_coef * e);
            *o = if t.0 == 1 { mean } else { mean + sigma * zz };
        }
    }
}

/// Closed-form marginal draw `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_sample(x0: &VideoTensor, t: Timestep, eps: &VideoTensor, sched: &NoiseSchedule) -> Result<VideoTensor> {
    sched.check(t)?;
    if x0.dims() != eps.dims() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims())));
    }
    let mut out = x0.clone();
    sched.noise_into(x0.data(), eps.data(), t, out.data_mut());
    Ok(out)
}

/// One ancestral step `x_{t-1} = μ(x_t, ε̂) + √β_t·z`, with `z` suppressed at `t = 1`.
pub fn reverse_step(x_t: &VideoTensor, eps_hat: &VideoTensor, t: Timestep, z: &VideoTensor, sched: &NoiseSchedule) -> Result<VideoTensor> {
    sched.check(t)?;
    if x_t.dims() != eps_hat.dims() || x_t.dims() != z.dims() {
        return Err(Error::Shape(format!("x_t {:?}, eps_hat {:?}, z {:?}", x_t.dims(), eps_hat.dims(), z.dims())));
    }
    let mut out = x_t.clone();
    sched.denoise_into(x_t.data(), eps_hat.data(), z.data(), t, out.data_mut());
    Ok(out)
}
