//! DDIM and DDPM sampling, with optional modulation of the frozen noise
//! prediction at every step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::denoiser::{mcm_predict, NoisePredictor};
use crate::diffusion::{predict_x0, static_threshold_tensor, VarianceSchedule};
use crate::error::{shape_err, Error, Result};
use crate::modulation::{encode_batch, gather_rows, modulate, ModalityBundle};
use crate::rng::derived;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerKind::Ddim),
            "ddpm" => Ok(SamplerKind::Ddpm),
            _ => Err(Error::Config(format!("unknown sampler '{s}' (expected ddim or ddpm)"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::Ddpm => "ddpm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub kind: SamplerKind,
    pub seed: u64,
    pub static_threshold: bool,
    /// Use the base prediction unchanged for samples without any modality.
    pub bypass: bool,
}

impl SampleConfig {
    pub fn ddim(num_steps: usize, eta: f64, seed: u64) -> Self {
        SampleConfig { num_steps, eta, kind: SamplerKind::Ddim, seed, static_threshold: true, bypass: true }
    }

    pub fn ddpm(timesteps: usize, seed: u64) -> Self {
        SampleConfig { num_steps: timesteps, eta: 1.0, kind: SamplerKind::Ddpm, seed, static_threshold: true, bypass: true }
    }

    pub fn validate(&self, schedule: &VarianceSchedule) -> Result<()> {
        let t = schedule.timesteps();
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.num_steps == 0 || self.num_steps > t {
            return Err(Error::InvalidArgument(format!("num_steps must be in 1..={t}, got {}", self.num_steps)));
        }
        if self.kind == SamplerKind::Ddpm && self.num_steps != t {
            return Err(Error::InvalidArgument(format!("ddpm runs all {t} steps, got num_steps = {}", self.num_steps)));
        }
        Ok(())
    }
}

/// `N` uniformly spaced timesteps from `T` down to `1`.
pub fn timestep_sequence(timesteps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > timesteps {
        return Err(Error::InvalidArgument(format!("cannot pick {num_steps} of {timesteps} steps")));
    }
    if num_steps == 1 {
        return Ok(vec![timesteps]);
    }
    let span = (timesteps - 1) as f64 / (num_steps - 1) as f64;
    Ok((0..num_steps).rev().map(|i| 1 + (i as f64 * span).round() as usize).collect())
}

pub fn sigma_t(s: &VarianceSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// DDIM update with the fresh noise supplied by the caller (`None` only
/// when `sigma_t` is zero).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step_with_noise<T: Scalar>(
    x_t: &Tensor<T>,
    eps_t: &Tensor<T>,
    t: usize,
    t_prev: usize,
    s: &VarianceSchedule,
    eta: f64,
    threshold: bool,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("t_prev = {t_prev} must precede t = {t}")));
    }
    let mut x0p = predict_x0(x_t, eps_t, t, s)?;
    if threshold {
        x0p = static_threshold_tensor(&x0p);
    }
    let ab_prev = s.alpha_bar(t_prev);
    let sigma = sigma_t(s, t, t_prev, eta);
    let mut radicand = 1.0 - ab_prev - sigma * sigma;
    if radicand < 0.0 {
        if radicand < -1e-12 {
            log::warn!("ddim radicand {radicand:e} clamped to 0 at t = {t}");
        }
        radicand = 0.0;
    }
    let (a, d) = (T::of(ab_prev.sqrt()), T::of(radicand.sqrt()));
    let mut out = x0p.zip_map(eps_t, "ddim_step", |x, e| a * x + d * e)?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::InvalidArgument("ddim step with sigma > 0 needs noise".into()))?;
        if z.shape() != out.shape() {
            return shape_err("ddim_step noise", z.shape(), out.shape());
        }
        let sg = T::of(sigma);
        out = out.zip_map(z, "ddim_step", |x, z| x + sg * z)?;
    }
    Ok(out)
}

/// One DDIM step; fresh noise comes from `rng` only when `sigma_t > 0`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Scalar, R: Rng + ?Sized>(
    x_t: &Tensor<T>,
    eps_t: &Tensor<T>,
    t: usize,
    t_prev: usize,
    s: &VarianceSchedule,
    eta: f64,
    threshold: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let noise = (sigma_t(s, t, t_prev, eta) > 0.0).then(|| Tensor::randn(x_t.shape(), rng));
    ddim_step_with_noise(x_t, eps_t, t, t_prev, s, eta, threshold, noise.as_ref())
}

/// Posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
pub fn posterior_variance(s: &VarianceSchedule, t: usize) -> f64 {
    s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t))
}

/// Ancestral DDPM update with caller-supplied noise (ignored at `t = 1`).
/// With `threshold` the mean is formed from the clamped `x0'` through the
/// posterior `q(x_{t-1} | x_t, x0')`; without it this reduces to
/// `(x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)`.
pub fn ddpm_step_with_noise<T: Scalar>(
    x_t: &Tensor<T>,
    eps_t: &Tensor<T>,
    t: usize,
    s: &VarianceSchedule,
    threshold: bool,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if t == 0 || t > s.timesteps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", s.timesteps())));
    }
    let (beta, alpha, ab, ab_prev) = (s.beta(t), s.alpha(t), s.alpha_bar(t), s.alpha_bar(t - 1));
    let mut mean = if threshold {
        let x0p = static_threshold_tensor(&predict_x0(x_t, eps_t, t, s)?);
        let c0 = T::of(ab_prev.sqrt() * beta / (1.0 - ab));
        let ct = T::of(alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        x0p.zip_map(x_t, "ddpm_step", |x0, xt| c0 * x0 + ct * xt)?
    } else {
        let k = T::of(beta / (1.0 - ab).sqrt());
        let inv = T::of(1.0 / alpha.sqrt());
        x_t.zip_map(eps_t, "ddpm_step", |x, e| (x - k * e) * inv)?
    };
    if t > 1 {
        let z = noise.ok_or_else(|| Error::InvalidArgument("ddpm step needs noise for t > 1".into()))?;
        if z.shape() != mean.shape() {
            return shape_err("ddpm_step noise", z.shape(), mean.shape());
        }
        let sd = T::of(posterior_variance(s, t).sqrt());
        mean = mean.zip_map(z, "ddpm_step", |m, z| m + sd * z)?;
    }
    Ok(mean)
}

pub fn ddpm_step<T: Scalar, R: Rng + ?Sized>(
    x_t: &Tensor<T>,
    eps_t: &Tensor<T>,
    t: usize,
    s: &VarianceSchedule,
    threshold: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let noise = (t > 1).then(|| Tensor::randn(x_t.shape(), rng));
    ddpm_step_with_noise(x_t, eps_t, t, s, threshold, noise.as_ref())
}

/// A conditioning module together with one condition bundle per sample.
#[derive(Clone, Copy)]
pub struct Conditioning<'a, T: Scalar> {
    pub mcm: &'a UNet<T>,
    pub bundles: &'a [ModalityBundle],
}

/// Per-step trace of the modulation magnitudes.
#[derive(Debug, Clone)]
pub struct ProfileStep<T: Scalar> {
    pub step: usize,
    pub t: usize,
    pub mean_abs_gamma: f64,
    pub mean_abs_nu: f64,
    /// Denoised estimate from the frozen model's noise alone.
    pub x0_base: Tensor<T>,
    /// Denoised estimate from the modulated noise.
    pub x0: Tensor<T>,
}

/// Draw samples `first_index .. first_index + count`; sample `i` uses its own
/// stream seeded with `cfg.seed + i`, so results do not depend on batching.
pub fn sample<T: Scalar, B: NoisePredictor<T>>(
    base: &B,
    cond: Option<Conditioning<'_, T>>,
    image_shape: &[usize],
    first_index: u64,
    count: usize,
    schedule: &VarianceSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor<T>> {
    run(base, cond, image_shape, first_index, count, schedule, cfg, None)
}

/// Sample while recording mean `|gamma|`, mean `|nu|` and `x0'` at every step.
pub fn modulation_profile<T: Scalar, B: NoisePredictor<T>>(
    base: &B,
    cond: Conditioning<'_, T>,
    image_shape: &[usize],
    first_index: u64,
    count: usize,
    schedule: &VarianceSchedule,
    cfg: &SampleConfig,
) -> Result<(Tensor<T>, Vec<ProfileStep<T>>)> {
    let mut trace = Vec::new();
    let out = run(base, Some(cond), image_shape, first_index, count, schedule, cfg, Some(&mut trace))?;
    Ok((out, trace))
}

fn randn_rows<T: Scalar>(rngs: &mut [ChaCha8Rng], image_shape: &[usize]) -> Result<Tensor<T>> {
    let rows: Vec<Tensor<T>> = rngs.iter_mut().map(|r| Tensor::randn(image_shape, r)).collect();
    let mut shape = vec![rngs.len()];
    shape.extend_from_slice(image_shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(&shape, data)
}

fn scatter_rows<T: Scalar>(dst: &mut Tensor<T>, rows: &[usize], src: &Tensor<T>) {
    let inner: usize = dst.shape()[1..].iter().product();
    let d = dst.data_mut();
    for (j, &i) in rows.iter().enumerate() {
        d[i * inner..(i + 1) * inner].copy_from_slice(&src.data()[j * inner..(j + 1) * inner]);
    }
}

#[allow(clippy::too_many_arguments)]
fn run<T: Scalar, B: NoisePredictor<T>>(
    base: &B,
    cond: Option<Conditioning<'_, T>>,
    image_shape: &[usize],
    first_index: u64,
    count: usize,
    schedule: &VarianceSchedule,
    cfg: &SampleConfig,
    mut trace: Option<&mut Vec<ProfileStep<T>>>,
) -> Result<Tensor<T>> {
    cfg.validate(schedule)?;
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut shape = vec![count];
    shape.extend_from_slice(image_shape);

    // Rows that go through the conditioning module.
    let mut active: Vec<usize> = Vec::new();
    if let Some(c) = &cond {
        if c.bundles.len() != count {
            return Err(Error::InvalidArgument(format!("{} bundles for {count} samples", c.bundles.len())));
        }
        active = (0..count).filter(|&i| !(cfg.bypass && c.bundles[i].is_empty())).collect();
    }
    let cond_stack = match (&cond, active.is_empty()) {
        (Some(c), false) => {
            if image_shape.len() != 3 {
                return Err(Error::InvalidArgument(format!("conditioning needs [C, H, W] images, got {image_shape:?}")));
            }
            let picked: Vec<ModalityBundle> = active.iter().map(|&i| c.bundles[i].clone()).collect();
            Some(Var::constant(encode_batch::<T>(&picked, image_shape[1], image_shape[2])?))
        }
        _ => None,
    };

    let mut rngs: Vec<ChaCha8Rng> = (0..count as u64).map(|i| derived(cfg.seed, first_index + i)).collect();
    let mut x = randn_rows::<T>(&mut rngs, image_shape)?;
    let steps = match cfg.kind {
        SamplerKind::Ddim => timestep_sequence(schedule.timesteps(), cfg.num_steps)?,
        SamplerKind::Ddpm => (1..=schedule.timesteps()).rev().collect(),
    };
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        let ts = vec![t; count];
        let x_var = Var::constant(x.clone());
        let mut eps = base.predict_noise(&x_var, &ts)?.value().clone();
        let eps_base = trace.is_some().then(|| eps.clone());
        let mut gamma_abs = 0.0;
        let mut nu_abs = 0.0;
        if let (Some(c), Some(stack)) = (&cond, &cond_stack) {
            let x_sub = gather_rows(&x, &active)?;
            let e_sub = Var::constant(gather_rows(&eps, &active)?);
            let stacked = Var::concat1(&[&Var::constant(x_sub), &e_sub, stack])?;
            let m = mcm_predict(c.mcm, &stacked, &ts[..active.len()])?;
            let e_mod = modulate(&e_sub, &m)?;
            scatter_rows(&mut eps, &active, e_mod.value());
            if trace.is_some() {
                gamma_abs = m.gamma.value().abs_mean();
                nu_abs = m.nu.value().abs_mean();
            }
        }
        if let (Some(tr), Some(eb)) = (trace.as_deref_mut(), &eps_base) {
            let clip = |v: Tensor<T>| if cfg.static_threshold { static_threshold_tensor(&v) } else { v };
            let x0_base = clip(predict_x0(&x, eb, t, schedule)?);
            let x0 = clip(predict_x0(&x, &eps, t, schedule)?);
            tr.push(ProfileStep { step: k, t, mean_abs_gamma: gamma_abs, mean_abs_nu: nu_abs, x0_base, x0 });
        }
        x = match cfg.kind {
            SamplerKind::Ddim => {
                let noise = if sigma_t(schedule, t, t_prev, cfg.eta) > 0.0 {
                    Some(randn_rows::<T>(&mut rngs, image_shape)?)
                } else {
                    None
                };
                ddim_step_with_noise(&x, &eps, t, t_prev, schedule, cfg.eta, cfg.static_threshold, noise.as_ref())?
            }
            SamplerKind::Ddpm => {
                let noise = if t > 1 { Some(randn_rows::<T>(&mut rngs, image_shape)?) } else { None };
                ddpm_step_with_noise(&x, &eps, t, schedule, cfg.static_threshold, noise.as_ref())?
            }
        };
        if !x.is_finite() {
            return Err(Error::Diverged { step: k, t });
        }
    }
    Ok(x)
}
