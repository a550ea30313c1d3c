//! Noise predictors: the common interface plus a small MLP for scalar data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::{linear, silu, sinusoidal_time_embedding};
use crate::modulation::ModulationParams;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::UNet;

/// Anything that maps `(x_t, t)` to a noise estimate of the same shape.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(&self, x_t: &Var<T>, ts: &[usize]) -> Result<Var<T>>;

    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
}

impl<T: Scalar> NoisePredictor<T> for UNet<T> {
    fn predict_noise(&self, x_t: &Var<T>, ts: &[usize]) -> Result<Var<T>> {
        base_predict(self, x_t, ts)
    }

    fn params(&self) -> &ParamStore<T> {
        UNet::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        UNet::params_mut(self)
    }
}

/// Noise prediction `eps_theta(x_t, t)` of a single-head network.
pub fn base_predict<T: Scalar>(net: &UNet<T>, x_t: &Var<T>, ts: &[usize]) -> Result<Var<T>> {
    if net.config().out_heads != 1 {
        return Err(Error::InvalidArgument(format!(
            "noise predictor needs 1 output head, network has {}",
            net.config().out_heads
        )));
    }
    Ok(net.forward(x_t, ts)?.remove(0))
}

/// Modulation parameters `(gamma, nu)` from a split-head network reading the
/// stacked `{x_t, eps_t, y_1, .., y_n}` input.
pub fn mcm_predict<T: Scalar>(net: &UNet<T>, stacked: &Var<T>, ts: &[usize]) -> Result<ModulationParams<T>> {
    if net.config().out_heads != 2 {
        return Err(Error::InvalidArgument(format!(
            "conditioning module needs 2 output heads, network has {}",
            net.config().out_heads
        )));
    }
    if stacked.shape().len() != 4 || stacked.shape()[1] != net.config().in_channels {
        return Err(Error::ShapeMismatch {
            op: "mcm_predict channels",
            lhs: stacked.shape().to_vec(),
            rhs: vec![net.config().in_channels],
        });
    }
    let mut out = net.forward(stacked, ts)?;
    let nu = out.pop().expect("two heads");
    let gamma = out.pop().expect("two heads");
    Ok(ModulationParams { gamma, nu })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub time_embed_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: 64, time_embed_dim: 32 }
    }
}

/// Three-layer MLP noise predictor for `[B, 1, 1, 1]` scalar "images".
#[derive(Debug, Clone)]
pub struct ScalarMlp<T: Scalar> {
    cfg: MlpConfig,
    params: ParamStore<T>,
    layers: [(ParamId, ParamId); 3],
}

impl<T: Scalar> ScalarMlp<T> {
    pub fn build(cfg: &MlpConfig, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || cfg.time_embed_dim == 0 || cfg.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("invalid MLP config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = [(1 + cfg.time_embed_dim, cfg.hidden), (cfg.hidden, cfg.hidden), (cfg.hidden, 1)];
        let mut ids = Vec::new();
        for (i, &(fin, fout)) in dims.iter().enumerate() {
            let bound = 1.0 / (fin as f64).sqrt();
            let w = params.add(format!("mlp.{i}.weight"), Tensor::rand_uniform(&[fout, fin], -bound, bound, &mut rng))?;
            let b = params.add(format!("mlp.{i}.bias"), Tensor::zeros(&[fout]))?;
            ids.push((w, b));
        }
        Ok(ScalarMlp { cfg: cfg.clone(), params, layers: [ids[0], ids[1], ids[2]] })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }
}

impl<T: Scalar> NoisePredictor<T> for ScalarMlp<T> {
    fn predict_noise(&self, x_t: &Var<T>, ts: &[usize]) -> Result<Var<T>> {
        let shape = x_t.shape().to_vec();
        let batch = shape[0];
        if shape.iter().product::<usize>() != batch || ts.len() != batch {
            return Err(Error::InvalidArgument(format!("scalar MLP needs one value per sample, got {shape:?}")));
        }
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let emb = Var::constant(sinusoidal_time_embedding::<T>(&tf, self.cfg.time_embed_dim)?);
        let x = x_t.reshape(&[batch, 1])?;
        let mut h = Var::concat1(&[&x, &emb])?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = linear(&h, &self.params.var(w), Some(&self.params.var(b)))?;
            if i < 2 {
                h = silu(&h)?;
            }
        }
        h.reshape(&shape)
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}
