//! The conditioning mechanism: condition encoding and modality dropout, the
//! modulation rule `eps' = eps * (1 + gamma) + nu`, the training objective and
//! the training loop against a frozen base model.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Var};
use crate::denoiser::{base_predict, mcm_predict};
use crate::diffusion::{forward_noise_batch, predict_x0_batch, static_threshold, VarianceSchedule};
use crate::error::{shape_err, Error, Result};
use crate::optim::AdamState;
use crate::rng::{seeded, RngState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::UNet;

/// Channel order of the condition stack, after `x_t` and `eps_t`.
pub const MODALITY_ORDER: [&str; 2] = ["seg", "sketch"];

/// Fill value for an absent modality channel.
pub const ABSENT_VALUE: f64 = -1.0;

/// Per-example conditions. `None` marks an absent modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Row-major class ids.
    pub seg: Option<Vec<u8>>,
    /// Row-major edge strengths in `[0, 1]`.
    pub sketch: Option<Vec<f32>>,
}

impl ModalityBundle {
    pub fn empty(height: usize, width: usize, num_classes: usize) -> Self {
        ModalityBundle { height, width, num_classes, seg: None, sketch: None }
    }

    pub fn has_seg(&self) -> bool {
        self.seg.is_some()
    }

    pub fn has_sketch(&self) -> bool {
        self.sketch.is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.seg.is_none() && self.sketch.is_none()
    }

    /// Keep only the selected modalities.
    pub fn select(&self, seg: bool, sketch: bool) -> Self {
        ModalityBundle {
            seg: if seg { self.seg.clone() } else { None },
            sketch: if sketch { self.sketch.clone() } else { None },
            ..self.clone()
        }
    }
}

/// Stack the condition channels `[seg, sketch]` into a `[2, H, W]` tensor.
/// Segmentation ids map to `k / (K - 1)`; absent modalities become `-1`.
pub fn encode_bundle<T: Scalar>(bundle: &ModalityBundle, height: usize, width: usize, num_classes: usize) -> Result<Tensor<T>> {
    if bundle.height != height || bundle.width != width {
        return shape_err("encode_bundle", &[bundle.height, bundle.width], &[height, width]);
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    let plane = height * width;
    let mut data = Vec::with_capacity(2 * plane);
    match &bundle.seg {
        Some(seg) => {
            if seg.len() != plane {
                return shape_err("encode_bundle seg", &[seg.len()], &[plane]);
            }
            let denom = (num_classes - 1) as f64;
            for &k in seg {
                if k as usize >= num_classes {
                    return Err(Error::InvalidArgument(format!("class id {k} outside 0..{num_classes}")));
                }
                data.push(T::of(k as f64 / denom));
            }
        }
        None => data.extend(std::iter::repeat_n(T::of(ABSENT_VALUE), plane)),
    }
    match &bundle.sketch {
        Some(sk) => {
            if sk.len() != plane {
                return shape_err("encode_bundle sketch", &[sk.len()], &[plane]);
            }
            data.extend(sk.iter().map(|&v| T::of(v as f64)));
        }
        None => data.extend(std::iter::repeat_n(T::of(ABSENT_VALUE), plane)),
    }
    Tensor::new(&[2, height, width], data)
}

/// Encode a batch of bundles into `[B, 2, H, W]`.
pub fn encode_batch<T: Scalar>(bundles: &[ModalityBundle], height: usize, width: usize) -> Result<Tensor<T>> {
    let parts = bundles
        .iter()
        .map(|b| encode_bundle::<T>(b, height, width, b.num_classes)?.reshape(&[1, 2, height, width]))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack0(&parts)
}

/// Which channels of an encoded `[2, H, W]` stack carry a modality
/// (present values lie in `[0, 1]`, absent ones are `-1`).
pub fn decode_presence<T: Scalar>(encoded: &Tensor<T>) -> Result<[bool; 2]> {
    let [c, h, w] = *encoded.shape() else {
        return Err(Error::InvalidArgument(format!("expected [2, H, W], got {:?}", encoded.shape())));
    };
    if c != 2 {
        return shape_err("decode_presence", encoded.shape(), &[2, h, w]);
    }
    let plane = h * w;
    let present = |ch: usize| encoded.data()[ch * plane..(ch + 1) * plane].iter().any(|v| v.as_f64() > -0.5);
    Ok([present(0), present(1)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutProbs {
    pub seg: f64,
    pub sketch: f64,
}

impl Default for DropoutProbs {
    fn default() -> Self {
        DropoutProbs { seg: 0.33, sketch: 0.33 }
    }
}

impl DropoutProbs {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("seg", self.seg), ("sketch", self.sketch)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("dropout probability for {name} is {p}")));
            }
        }
        Ok(())
    }
}

/// Independently drop each modality with its probability. Two uniforms are
/// always drawn so the stream advances the same way for every bundle.
pub fn apply_dropout<R: Rng + ?Sized>(bundle: &ModalityBundle, probs: &DropoutProbs, rng: &mut R) -> ModalityBundle {
    let u = Uniform::new(0.0f64, 1.0).expect("unit interval");
    let drop_seg = rng.sample(u) < probs.seg;
    let drop_sketch = rng.sample(u) < probs.sketch;
    let mut out = bundle.clone();
    if drop_seg {
        out.seg = None;
    }
    if drop_sketch {
        out.sketch = None;
    }
    out
}

/// Multiplicative and additive modulation, both shaped like the noise.
#[derive(Debug, Clone)]
pub struct ModulationParams<T: Scalar> {
    pub gamma: Var<T>,
    pub nu: Var<T>,
}

impl<T: Scalar> ModulationParams<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        ModulationParams { gamma: Var::constant(Tensor::zeros(shape)), nu: Var::constant(Tensor::zeros(shape)) }
    }
}

/// `eps * (1 + gamma) + nu`.
pub fn modulate<T: Scalar>(eps_t: &Var<T>, m: &ModulationParams<T>) -> Result<Var<T>> {
    if m.gamma.shape() != eps_t.shape() || m.nu.shape() != eps_t.shape() {
        return shape_err("modulate", eps_t.shape(), m.gamma.shape());
    }
    eps_t.mul(&m.gamma.add_scalar(T::one())?)?.add(&m.nu)
}

/// Weight of the L1 term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum L1Weight {
    /// `1 / (b * h * w * c)` of the current batch.
    Auto,
    Fixed(f64),
}

impl L1Weight {
    pub fn resolve(&self, shape: &[usize]) -> f64 {
        match *self {
            L1Weight::Auto => 1.0 / shape.iter().product::<usize>() as f64,
            L1Weight::Fixed(w) => w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmTrainConfig {
    pub lambda_x: f64,
    pub lambda_1: L1Weight,
    pub dropout: DropoutProbs,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub static_threshold: bool,
}

impl Default for McmTrainConfig {
    fn default() -> Self {
        McmTrainConfig {
            lambda_x: 1.0,
            lambda_1: L1Weight::Auto,
            dropout: DropoutProbs::default(),
            batch_size: 32,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 0,
            static_threshold: true,
        }
    }
}

impl McmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dropout.validate()?;
        if !(self.lambda_x > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_x must be positive, got {}", self.lambda_x)));
        }
        if let L1Weight::Fixed(w) = self.lambda_1 {
            if !(w >= 0.0) {
                return Err(Error::InvalidArgument(format!("lambda_1 must be >= 0, got {w}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Objective value and its parts for logging.
pub struct McmLoss<T: Scalar> {
    pub total: Var<T>,
    pub mse: f64,
    pub l1: f64,
    pub lambda_1: f64,
}

/// `lambda_x * MSE(x0', x0) + lambda_1 * (sum|gamma| + sum|nu|)` with
/// `x0'` reconstructed from the modulated noise (and optionally clamped).
#[allow(clippy::too_many_arguments)]
pub fn mcm_loss<T: Scalar>(
    x0: &Tensor<T>,
    x_t: &Var<T>,
    eps_t: &Var<T>,
    m: &ModulationParams<T>,
    ts: &[usize],
    schedule: &VarianceSchedule,
    lambda_x: f64,
    lambda_1: L1Weight,
    threshold: bool,
) -> Result<McmLoss<T>> {
    if x_t.requires_grad() || eps_t.requires_grad() {
        return Err(Error::InvalidArgument("x_t and eps_t must be detached before the modulation loss".into()));
    }
    if x0.shape() != x_t.shape() {
        return shape_err("mcm_loss", x0.shape(), x_t.shape());
    }
    let eps_mod = modulate(eps_t, m)?;
    let mut x0p = predict_x0_batch(x_t, &eps_mod, ts, schedule)?;
    if threshold {
        x0p = static_threshold(&x0p)?;
    }
    let mse = x0p.sub(&Var::constant(x0.clone()))?.square()?.mean()?.mul_scalar(T::of(lambda_x))?;
    let l1_weight = lambda_1.resolve(eps_t.shape());
    let l1 = m.gamma.abs()?.sum()?.add(&m.nu.abs()?.sum()?)?.mul_scalar(T::of(l1_weight))?;
    let total = mse.add(&l1)?;
    let value = total.value().data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("mcm_loss".into()));
    }
    Ok(McmLoss {
        mse: mse.value().data()[0].as_f64(),
        l1: l1.value().data()[0].as_f64(),
        total,
        lambda_1: l1_weight,
    })
}

/// Images `[N, C, H, W]` with one condition bundle each.
#[derive(Debug, Clone)]
pub struct ConditionedSet<T: Scalar> {
    pub images: Tensor<T>,
    pub bundles: Vec<ModalityBundle>,
}

impl<T: Scalar> ConditionedSet<T> {
    pub fn new(images: Tensor<T>, bundles: Vec<ModalityBundle>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != bundles.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bundles for image batch {:?}",
                bundles.len(),
                images.shape()
            )));
        }
        Ok(ConditionedSet { images, bundles })
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Ok(ConditionedSet { images: self.images.narrow0(range.start, range.end)?, bundles: self.bundles[range].to_vec() })
    }
}

/// Gather rows of a `[N, ...]` tensor.
pub fn gather_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let inner: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        if i >= t.shape()[0] {
            return Err(Error::InvalidArgument(format!("row {i} out of range")));
        }
        data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub l1: f64,
    /// Mean per-example `||gamma||_1` over the epoch.
    pub gamma_l1: f64,
    /// Mean per-example `||nu||_1` over the epoch.
    pub nu_l1: f64,
}

/// Resumable training state for a conditioning module.
pub struct McmTrainer<T: Scalar> {
    pub cfg: McmTrainConfig,
    pub schedule: VarianceSchedule,
    pub mcm: UNet<T>,
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
    pub log: Vec<McmEpochLog>,
    pub step_losses: Vec<f64>,
}

impl<T: Scalar> McmTrainer<T> {
    pub fn new(mcm: UNet<T>, schedule: VarianceSchedule, cfg: McmTrainConfig) -> Result<Self> {
        cfg.validate()?;
        if mcm.config().out_heads != 2 {
            return Err(Error::InvalidArgument("conditioning module must have a split head".into()));
        }
        let adam = AdamState::new(mcm.params(), cfg.learning_rate);
        Ok(McmTrainer {
            rng: seeded(cfg.seed),
            cfg,
            schedule,
            mcm,
            adam,
            epochs_done: 0,
            log: Vec::new(),
            step_losses: Vec::new(),
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// One optimization step on the given examples; returns the loss.
    pub fn step(&mut self, base: &UNet<T>, data: &ConditionedSet<T>, idx: &[usize]) -> Result<(f64, McmStepStats)> {
        let x0 = gather_rows(&data.images, idx)?;
        let shape = x0.shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let b = idx.len();
        let tdist = Uniform::new_inclusive(1usize, self.schedule.timesteps()).expect("T >= 1");
        let ts: Vec<usize> = (0..b).map(|_| self.rng.sample(tdist)).collect();
        let eps = Tensor::<T>::randn(&shape, &mut self.rng);
        let x_t = forward_noise_batch(&Var::constant(x0.clone()), &ts, &Var::constant(eps), &self.schedule)?.detach();
        let eps_t = base_predict(base, &x_t, &ts)?.detach();
        let bundles: Vec<ModalityBundle> =
            idx.iter().map(|&i| apply_dropout(&data.bundles[i], &self.cfg.dropout, &mut self.rng)).collect();
        let cond = Var::constant(encode_batch::<T>(&bundles, h, w)?);
        let stacked = Var::concat1(&[&x_t, &eps_t, &cond])?;
        let m = mcm_predict(&self.mcm, &stacked, &ts)?;
        let loss = mcm_loss(
            &x0,
            &x_t,
            &eps_t,
            &m,
            &ts,
            &self.schedule,
            self.cfg.lambda_x,
            self.cfg.lambda_1,
            self.cfg.static_threshold,
        )?;
        let stats = McmStepStats {
            mse: loss.mse,
            l1: loss.l1,
            gamma_l1: m.gamma.value().data().iter().map(|v| v.abs().as_f64()).sum::<f64>() / b as f64,
            nu_l1: m.nu.value().data().iter().map(|v| v.abs().as_f64()).sum::<f64>() / b as f64,
        };
        let value = loss.total.value().data()[0].as_f64();
        drop(m);
        backward(&loss.total, self.mcm.params_mut())?;
        self.adam.step(self.mcm.params_mut())?;
        self.step_losses.push(value);
        Ok((value, stats))
    }

    /// Train for `epochs` more epochs over `data` against the frozen `base`.
    pub fn train_epochs(&mut self, base: &UNet<T>, data: &ConditionedSet<T>, epochs: usize) -> Result<()> {
        if !base.is_frozen() {
            return Err(Error::InvalidArgument("base model must be frozen".into()));
        }
        if data.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        let expected_in = 2 * data.image_shape()[0] + MODALITY_ORDER.len();
        if self.mcm.config().in_channels != expected_in {
            return Err(Error::InvalidArgument(format!(
                "conditioning module reads {} channels, data needs {expected_in}",
                self.mcm.config().in_channels
            )));
        }
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.rng);
            let mut acc = McmEpochLog { epoch: self.epochs_done + 1, loss: 0.0, mse: 0.0, l1: 0.0, gamma_l1: 0.0, nu_l1: 0.0 };
            let mut steps = 0usize;
            for batch in order.chunks(self.cfg.batch_size) {
                let (loss, s) = self.step(base, data, batch)?;
                acc.loss += loss;
                acc.mse += s.mse;
                acc.l1 += s.l1;
                acc.gamma_l1 += s.gamma_l1;
                acc.nu_l1 += s.nu_l1;
                steps += 1;
            }
            let n = steps as f64;
            acc.loss /= n;
            acc.mse /= n;
            acc.l1 /= n;
            acc.gamma_l1 /= n;
            acc.nu_l1 /= n;
            log::info!(
                "mcm epoch {}: loss {:.5} (mse {:.5}, l1 {:.5}) |gamma|_1 {:.3} |nu|_1 {:.3}",
                acc.epoch,
                acc.loss,
                acc.mse,
                acc.l1,
                acc.gamma_l1,
                acc.nu_l1
            );
            self.log.push(acc);
            self.epochs_done += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct McmStepStats {
    pub mse: f64,
    pub l1: f64,
    pub gamma_l1: f64,
    pub nu_l1: f64,
}

/// Run the full training loop: `cfg.epochs` epochs from a fresh trainer.
pub fn train_mcm<T: Scalar>(
    base: &UNet<T>,
    mcm: UNet<T>,
    schedule: &VarianceSchedule,
    data: &ConditionedSet<T>,
    cfg: &McmTrainConfig,
) -> Result<McmTrainer<T>> {
    let mut trainer = McmTrainer::new(mcm, schedule.clone(), cfg.clone())?;
    trainer.train_epochs(base, data, cfg.epochs)?;
    Ok(trainer)
}
