//! Variance schedules, forward noising and denoised-estimate reconstruction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters of a linear schedule, as stored alongside trained models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t = prod_{i<=t} alpha_i`
/// for `t = 1..=T`. Index 0 of `alpha_bar` is the `alpha_bar_0 = 1` convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {}", betas.len())));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(VarianceSchedule { betas, alphas, alpha_bars })
    }

    /// Betas linearly interpolated from `beta_start` to `beta_end` inclusive.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {timesteps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        let betas = (0..timesteps).map(|i| beta_start + step * i as f64).collect();
        Self::from_betas(betas)
    }

    /// Linear 1e-4..0.02 over 1000 steps.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.timesteps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar_1 ..= alpha_bar_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    /// Per-sample coefficient tensor shaped `[B, 1, .., 1]` for broadcasting.
    fn coef<T: Scalar>(&self, ts: &[usize], rank: usize, f: impl Fn(f64) -> f64) -> Result<Var<T>> {
        let mut shape = vec![1; rank];
        shape[0] = ts.len();
        let vals = ts
            .iter()
            .map(|&t| {
                self.check(t)?;
                Ok(T::of(f(self.alpha_bar(t))))
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(Var::constant(Tensor::new(&shape, vals)?))
    }
}

fn check_batch(x: &[usize], other: &[usize], ts: &[usize], op: &'static str) -> Result<()> {
    if x != other {
        return shape_err(op, x, other);
    }
    if x.is_empty() || x[0] != ts.len() {
        return Err(Error::InvalidArgument(format!("{op}: {} timesteps for batch shape {x:?}", ts.len())));
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`, one timestep per
/// leading-axis sample.
pub fn forward_noise_batch<T: Scalar>(
    x0: &Var<T>,
    ts: &[usize],
    eps: &Var<T>,
    s: &VarianceSchedule,
) -> Result<Var<T>> {
    check_batch(x0.shape(), eps.shape(), ts, "forward_noise")?;
    let rank = x0.shape().len();
    let a = s.coef::<T>(ts, rank, f64::sqrt)?;
    let b = s.coef::<T>(ts, rank, |ab| (1.0 - ab).sqrt())?;
    x0.mul(&a)?.add(&eps.mul(&b)?)
}

/// Forward noising at a single timestep for any tensor shape.
pub fn forward_noise<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, s: &VarianceSchedule) -> Result<Tensor<T>> {
    s.check(t)?;
    if x0.shape() != eps.shape() {
        return shape_err("forward_noise", x0.shape(), eps.shape());
    }
    let a = T::of(s.alpha_bar(t).sqrt());
    let b = T::of((1.0 - s.alpha_bar(t)).sqrt());
    x0.zip_map(eps, "forward_noise", |x, e| a * x + b * e)
}

/// `(x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`, differentiable in
/// both inputs, one timestep per sample.
pub fn predict_x0_batch<T: Scalar>(
    x_t: &Var<T>,
    eps_pred: &Var<T>,
    ts: &[usize],
    s: &VarianceSchedule,
) -> Result<Var<T>> {
    check_batch(x_t.shape(), eps_pred.shape(), ts, "predict_x0")?;
    let rank = x_t.shape().len();
    let inv = s.coef::<T>(ts, rank, |ab| 1.0 / ab.sqrt())?;
    let k = s.coef::<T>(ts, rank, |ab| (1.0 - ab).sqrt() / ab.sqrt())?;
    x_t.mul(&inv)?.sub(&eps_pred.mul(&k)?)
}

/// Denoised estimate at a single timestep for any tensor shape.
pub fn predict_x0<T: Scalar>(x_t: &Tensor<T>, eps_pred: &Tensor<T>, t: usize, s: &VarianceSchedule) -> Result<Tensor<T>> {
    s.check(t)?;
    if x_t.shape() != eps_pred.shape() {
        return shape_err("predict_x0", x_t.shape(), eps_pred.shape());
    }
    let inv = T::of(1.0 / s.alpha_bar(t).sqrt());
    let k = T::of((1.0 - s.alpha_bar(t)).sqrt() / s.alpha_bar(t).sqrt());
    let out = x_t.zip_map(eps_pred, "predict_x0", |x, e| x * inv - e * k)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("predict_x0".into()));
    }
    Ok(out)
}

/// Clamp a denoised estimate into `[-1, 1]`.
pub fn static_threshold<T: Scalar>(x0p: &Var<T>) -> Result<Var<T>> {
    x0p.clamp(-T::one(), T::one())
}

pub fn static_threshold_tensor<T: Scalar>(x0p: &Tensor<T>) -> Tensor<T> {
    x0p.map(|v| v.max(-T::one()).min(T::one()))
}
