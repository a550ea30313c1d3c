//! Epsilon-prediction training for base noise predictors.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Var};
use crate::denoiser::NoisePredictor;
use crate::diffusion::{forward_noise_batch, VarianceSchedule};
use crate::error::{Error, Result};
use crate::modulation::gather_rows;
use crate::optim::AdamState;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig { batch_size: 32, epochs: 10, learning_rate: 2e-4, seed: 0 }
    }
}

/// `mean((eps_hat - eps)^2)` for a batch of clean samples at random steps.
pub fn epsilon_loss<T: Scalar, M: NoisePredictor<T>>(
    net: &M,
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &VarianceSchedule,
) -> Result<Var<T>> {
    let eps = Var::constant(eps.clone());
    let x_t = forward_noise_batch(&Var::constant(x0.clone()), ts, &eps, schedule)?;
    net.predict_noise(&x_t, ts)?.sub(&eps)?.square()?.mean()
}

/// Resumable training state for a base model.
pub struct BaseTrainer<T: Scalar, M: NoisePredictor<T>> {
    pub cfg: BaseTrainConfig,
    pub schedule: VarianceSchedule,
    pub net: M,
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
    /// Mean loss per finished epoch.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

impl<T: Scalar, M: NoisePredictor<T>> BaseTrainer<T, M> {
    pub fn new(net: M, schedule: VarianceSchedule, cfg: BaseTrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid training config {cfg:?}")));
        }
        let adam = AdamState::new(net.params(), cfg.learning_rate);
        Ok(BaseTrainer {
            rng: seeded(cfg.seed),
            cfg,
            schedule,
            net,
            adam,
            epochs_done: 0,
            epoch_losses: Vec::new(),
            step_losses: Vec::new(),
        })
    }

    pub fn step(&mut self, data: &Tensor<T>, idx: &[usize]) -> Result<f64> {
        let x0 = gather_rows(data, idx)?;
        let tdist = Uniform::new_inclusive(1usize, self.schedule.timesteps()).expect("T >= 1");
        let ts: Vec<usize> = idx.iter().map(|_| self.rng.sample(tdist)).collect();
        let eps = Tensor::<T>::randn(x0.shape(), &mut self.rng);
        let loss = epsilon_loss(&self.net, &x0, &ts, &eps, &self.schedule)?;
        let value = loss.value().data()[0].as_f64();
        backward(&loss, self.net.params_mut())?;
        self.adam.step(self.net.params_mut())?;
        self.step_losses.push(value);
        Ok(value)
    }

    /// Train for `epochs` more passes over the rows of `data`.
    pub fn train_epochs(&mut self, data: &Tensor<T>, epochs: usize) -> Result<()> {
        if data.rank() < 2 {
            return Err(Error::Dataset(format!("expected [N, ...] data, got {:?}", data.shape())));
        }
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..data.shape()[0]).collect();
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut steps = 0usize;
            for batch in order.chunks(self.cfg.batch_size) {
                total += self.step(data, batch)?;
                steps += 1;
            }
            let mean = total / steps as f64;
            self.epochs_done += 1;
            log::info!("base epoch {}: loss {:.5}", self.epochs_done, mean);
            self.epoch_losses.push(mean);
        }
        Ok(())
    }
}

pub fn train_base<T: Scalar, M: NoisePredictor<T>>(
    net: M,
    schedule: &VarianceSchedule,
    data: &Tensor<T>,
    cfg: &BaseTrainConfig,
) -> Result<BaseTrainer<T, M>> {
    let mut trainer = BaseTrainer::new(net, schedule.clone(), cfg.clone())?;
    trainer.train_epochs(data, cfg.epochs)?;
    Ok(trainer)
}
