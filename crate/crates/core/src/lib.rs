//! Multimodal conditioning modules for frozen pixel-space diffusion models.
//!
//! A small trainable U-Net reads the noisy image, the frozen model's noise
//! prediction and a stack of condition channels, and outputs per-pixel
//! modulation parameters `(gamma, nu)`. The frozen prediction is replaced by
//! `eps * (1 + gamma) + nu` at every sampling step, so the base model never
//! needs gradients or weight updates.
//!
//! The numeric core is generic over [`Scalar`] (`f32` and `f64`); the
//! aliases below fix the `f32` instantiation used throughout training,
//! sampling and checkpoints.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod metrics;
pub mod modulation;
pub mod optim;
pub mod param;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod unet;

pub use autodiff::{backward, detach, Var};
pub use error::{Error, Result};
pub use optim::AdamState;
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type ParamStore32 = ParamStore<f32>;

pub use diffusion::{ScheduleSpec, VarianceSchedule};
pub use unet::{UNet, UNetConfig};
pub type UNet32 = UNet<f32>;
pub use denoiser::{base_predict, mcm_predict, NoisePredictor, ScalarMlp};
pub use modulation::{ModalityBundle, ModulationParams, McmTrainConfig};
pub use sampler::{sample, Conditioning, SampleConfig, SamplerKind};
pub use training::{BaseTrainConfig, BaseTrainer};
pub use synth::{PairedExample, SceneParams, SceneSpec};
