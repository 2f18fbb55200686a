//! Variance schedules, forward noising, the noise-prediction loss, and
//! ancestral sampling with fixed variance `β_t`.
//!
//! Timesteps run `1..=T`; index 0 of the cumulative table is the clean
//! image (`ᾱ_0 = 1`).

use diffrep_tensor::rng::stream;
use diffrep_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit betas (`betas[0]` is `β_1`).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Parameter {
                field: "timesteps",
                reason: "must be at least 1".into(),
            });
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Parameter {
                field: "betas",
                reason: format!("{b} is outside (0, 1)"),
            });
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut running = 1.0;
        for a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product; accepts `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
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

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Timestep {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// Timestep nearest to `fraction · T`, clamped into range.
    pub fn fraction(&self, fraction: f64) -> usize {
        ((fraction * self.timesteps() as f64).round() as usize).clamp(1, self.timesteps())
    }
}

/// Betas interpolated linearly from `beta_start` at `t = 1` to `beta_end`
/// at `t = T`.
pub fn build_linear_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Parameter {
            field: "timesteps",
            reason: "must be at least 1".into(),
        });
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::Parameter {
            field: "beta_start",
            reason: format!("{beta_start} is outside (0, 1)"),
        });
    }
    if !(beta_end >= beta_start && beta_end < 1.0) {
        return Err(Error::Parameter {
            field: "beta_end",
            reason: format!("{beta_end} must lie in [beta_start, 1)"),
        });
    }
    let betas = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl TryFrom<&ScheduleParams> for NoiseSchedule {
    type Error = Error;

    fn try_from(p: &ScheduleParams) -> Result<Self> {
        build_linear_schedule(p.timesteps, p.beta_start, p.beta_end)
    }
}

#[derive(Clone, Debug)]
pub struct NoisedSample {
    pub x_t: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

fn same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<NoisedSample> {
    schedule.check_timestep(t)?;
    same_shape("noise", x0, eps)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = x0.zip_map(eps, |x, e| a * x + b * e);
    Ok(NoisedSample {
        x_t,
        t,
        eps: eps.clone(),
    })
}

/// Same as [`forward_noise`] with a per-item timestep over a `[N, ...]` batch.
pub fn forward_noise_batch(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    same_shape("noise", x0, eps)?;
    let n = x0.dim(0);
    if ts.len() != n {
        return Err(Error::CountMismatch {
            what: "timesteps vs batch",
            left: ts.len(),
            right: n,
        });
    }
    let per = x0.numel() / n.max(1);
    let mut out = x0.data().to_vec();
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_timestep(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * per..(i + 1) * per;
        for (o, e) in out[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * e;
        }
    }
    Ok(Tensor::new(x0.shape().to_vec(), out))
}

/// Solve the noising equation for `x0` given the noise that produced `x_t`.
pub fn recover_clean(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    same_shape("noise", x_t, eps)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.zip_map(eps, |x, e| (x - b * e) / a))
}

/// Mean squared error between predicted and true noise.
pub fn simple_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<f64> {
    same_shape("loss", eps_pred, eps)?;
    let sum: f64 = eps_pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(p, e)| (p - e) * (p - e))
        .sum();
    Ok(sum / eps.numel() as f64)
}

/// One ancestral step `x_t → x_{t−1}`. `noise` is required to be `None` at
/// `t = 1`; at later steps `None` means a zero draw.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    eps_pred: &Tensor,
    x_t: &Tensor,
    t: usize,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    same_shape("prediction", x_t, eps_pred)?;
    if t == 1 && noise.is_some() {
        return Err(Error::NoiseAtFinalStep);
    }
    let beta = schedule.beta(t);
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let mean = x_t.zip_map(eps_pred, |x, e| (x - coef * e) * inv_sqrt_alpha);
    match noise {
        Some(z) => {
            same_shape("noise", x_t, z)?;
            let sigma = beta.sqrt();
            Ok(mean.zip_map(z, |m, z| m + sigma * z))
        }
        None => Ok(mean),
    }
}

/// Anything that predicts the noise in a batch `[N, C, H, W]` at timestep `t`.
pub trait Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// Run the reverse chain from `x_T`, asking `noise(t, shape)` for the draw
/// at every step `t > 1`.
pub fn generate_from<D, F>(
    model: &D,
    schedule: &NoiseSchedule,
    x_start: Tensor,
    mut noise: F,
) -> Result<Tensor>
where
    D: Denoiser + ?Sized,
    F: FnMut(usize, &[usize]) -> Tensor,
{
    let mut x = x_start;
    for t in (1..=schedule.timesteps()).rev() {
        let eps = model.predict_noise(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(Error::shape("denoiser output", x.shape(), eps.shape()));
        }
        let z = (t > 1).then(|| noise(t, x.shape()));
        x = reverse_step(schedule, &eps, &x, t, z.as_ref())?;
    }
    Ok(x)
}

/// Sample from seeded Gaussian `x_T`. A rank-3 `shape` is a single image and
/// is run as a batch of one.
pub fn generate<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    let single = shape.len() == 3;
    let batch_shape: Vec<usize> = if single {
        [&[1], shape].concat()
    } else {
        shape.to_vec()
    };
    let x_start = Tensor::randn(batch_shape, &mut stream(seed, "sample-start", 0));
    let out = generate_from(model, schedule, x_start, |t, s| {
        Tensor::randn(s.to_vec(), &mut stream(seed, "sample-noise", t as u64))
    })?;
    Ok(if single {
        out.reshape(shape.to_vec())
    } else {
        out
    })
}
