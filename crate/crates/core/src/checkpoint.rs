//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `MCMD`, version `u32`, tensor count `u32`;
//! per tensor a `u16` name length and UTF-8 name, `u8` rank, `u32` dims,
//! `u8` dtype code and the raw payload; then a `u32`-length-prefixed UTF-8
//! JSON metadata blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::modulation::{McmTrainConfig, McmTrainer, MODALITY_ORDER};
use crate::optim::AdamState;
use crate::param::ParamStore;
use crate::rng::RngState;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::training::{BaseTrainConfig, BaseTrainer};
use crate::unet::{UNet, UNetConfig};

pub const MAGIC: &[u8; 4] = b"MCMD";
pub const VERSION: u32 = 1;

/// Named tensors plus a JSON metadata string.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint<T: Scalar> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub metadata: String,
}

pub fn encode<T: Scalar>(tensors: &[(&str, &Tensor<T>)], metadata: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| fmt("too many tensors"))?.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| fmt("tensor name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.rank()).map_err(|_| fmt("rank too large"))?);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| fmt("dimension too large"))?.to_le_bytes());
        }
        out.push(T::DTYPE as u8);
        T::to_le_bytes_vec(t.data(), &mut out);
    }
    let meta = metadata.as_bytes();
    out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| fmt("metadata too large"))?.to_le_bytes());
    out.extend_from_slice(meta);
    Ok(out)
}

fn fmt(msg: &str) -> Error {
    Error::Format(msg.to_string())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| fmt("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<RawCheckpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| fmt("tensor name is not UTF-8"))?.to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| fmt("unknown dtype"))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!("tensor {name} has dtype {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt("tensor too large"))?;
        let bytes = numel.checked_mul(dtype.size()).ok_or_else(|| fmt("tensor too large"))?;
        let data = T::from_le_slice(r.take(bytes)?);
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    let meta_len = r.u32()? as usize;
    let metadata = std::str::from_utf8(r.take(meta_len)?).map_err(|_| fmt("metadata is not UTF-8"))?.to_string();
    if r.pos != bytes.len() {
        return Err(fmt("trailing bytes after metadata"));
    }
    Ok(RawCheckpoint { tensors, metadata })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Base,
    Mcm,
}

/// Optimizer scalars; moments travel as `adam.m.*` / `adam.v.*` tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epochs_done: usize,
    pub adam: AdamMeta,
    pub rng: RngState,
    pub config: serde_json::Value,
    pub history: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: ModelRole,
    pub unet: UNetConfig,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    /// Input layout of a conditioning module: `x_t`, `eps_t`, then modalities.
    pub modality_order: Vec<String>,
    pub num_classes: Option<usize>,
    pub training: Option<TrainingState>,
}

impl CheckpointMeta {
    pub fn new(role: ModelRole, unet: &UNetConfig, schedule: ScheduleSpec, seed: u64) -> Self {
        CheckpointMeta {
            role,
            unet: unet.clone(),
            schedule,
            seed,
            modality_order: MODALITY_ORDER.iter().map(|s| s.to_string()).collect(),
            num_classes: None,
            training: None,
        }
    }
}

/// A loaded network with its metadata and, if present, optimizer moments.
pub struct LoadedModel<T: Scalar> {
    pub net: UNet<T>,
    pub meta: CheckpointMeta,
    pub adam: Option<AdamState<T>>,
}

fn model_bytes<T: Scalar>(params: &ParamStore<T>, adam: Option<&AdamState<T>>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut names: Vec<String> = Vec::new();
    let mut tensors: Vec<&Tensor<T>> = Vec::new();
    for p in params.iter() {
        names.push(p.name.clone());
        tensors.push(&p.tensor);
    }
    if let Some(a) = adam {
        for (p, (m, v)) in params.iter().zip(a.m.iter().zip(&a.v)) {
            names.push(format!("adam.m.{}", p.name));
            tensors.push(m);
            names.push(format!("adam.v.{}", p.name));
            tensors.push(v);
        }
    }
    let pairs: Vec<(&str, &Tensor<T>)> = names.iter().map(String::as_str).zip(tensors).collect();
    encode(&pairs, &serde_json::to_string(meta)?)
}

/// Serialize a network (and optionally its optimizer moments).
pub fn save_model<T: Scalar>(path: &Path, net: &UNet<T>, adam: Option<&AdamState<T>>, meta: &CheckpointMeta) -> Result<()> {
    if meta.unet != *net.config() {
        return Err(Error::InvalidArgument("metadata config differs from the network".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, model_bytes(net.params(), adam, meta)?)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<LoadedModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    model_from_bytes(&bytes)
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<LoadedModel<T>> {
    let raw = decode::<T>(bytes)?;
    let meta: CheckpointMeta = serde_json::from_str(&raw.metadata)?;
    let mut net = UNet::<T>::build(&meta.unet, meta.seed)?;
    let mut moments_m: Vec<Option<Tensor<T>>> = vec![None; net.params().len()];
    let mut moments_v: Vec<Option<Tensor<T>>> = vec![None; net.params().len()];
    let mut seen = vec![false; net.params().len()];
    for (name, t) in raw.tensors {
        let (slot, pname) = if let Some(n) = name.strip_prefix("adam.m.") {
            (1, n)
        } else if let Some(n) = name.strip_prefix("adam.v.") {
            (2, n)
        } else {
            (0, name.as_str())
        };
        let id = net.params().id(pname).ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
        if t.shape() != net.params().get(id).tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                net.params().get(id).tensor.shape()
            )));
        }
        match slot {
            0 => {
                seen[id.0] = true;
                net.params_mut().get_mut(id).tensor = t;
            }
            1 => moments_m[id.0] = Some(t),
            _ => moments_v[id.0] = Some(t),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("missing tensor {}", net.params().get(crate::param::ParamId(i)).name)));
    }
    let adam = match (&meta.training, moments_m.iter().all(Option::is_some), moments_v.iter().all(Option::is_some)) {
        (Some(tr), true, true) => Some(AdamState {
            step: tr.adam.step,
            lr: tr.adam.lr,
            beta1: tr.adam.beta1,
            beta2: tr.adam.beta2,
            eps: tr.adam.eps,
            m: moments_m.into_iter().map(|m| m.expect("checked")).collect(),
            v: moments_v.into_iter().map(|v| v.expect("checked")).collect(),
        }),
        _ => {
            if moments_m.iter().any(Option::is_some) || moments_v.iter().any(Option::is_some) {
                return Err(fmt("incomplete optimizer state"));
            }
            None
        }
    };
    Ok(LoadedModel { net, meta, adam })
}

fn adam_meta<T: Scalar>(a: &AdamState<T>) -> AdamMeta {
    AdamMeta { step: a.step, lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
}

/// Save a base trainer so that training can resume exactly.
pub fn save_base_trainer<T: Scalar>(path: &Path, tr: &BaseTrainer<T, UNet<T>>, schedule: ScheduleSpec, seed: u64) -> Result<()> {
    let mut meta = CheckpointMeta::new(ModelRole::Base, tr.net.config(), schedule, seed);
    meta.training = Some(TrainingState {
        epochs_done: tr.epochs_done,
        adam: adam_meta(&tr.adam),
        rng: RngState::capture(&tr.rng),
        config: serde_json::to_value(&tr.cfg)?,
        history: serde_json::to_value(&tr.epoch_losses)?,
    });
    save_model(path, &tr.net, Some(&tr.adam), &meta)
}

pub fn load_base_trainer<T: Scalar>(path: &Path) -> Result<(BaseTrainer<T, UNet<T>>, CheckpointMeta)> {
    let loaded = load_model::<T>(path)?;
    let (Some(tr), Some(adam)) = (loaded.meta.training.clone(), loaded.adam) else {
        return Err(fmt("checkpoint carries no training state"));
    };
    if loaded.meta.role != ModelRole::Base {
        return Err(fmt("not a base checkpoint"));
    }
    let cfg: BaseTrainConfig = serde_json::from_value(tr.config)?;
    let mut trainer = BaseTrainer::new(loaded.net, loaded.meta.schedule.build()?, cfg)?;
    trainer.adam = adam;
    trainer.rng = tr.rng.restore();
    trainer.epochs_done = tr.epochs_done;
    trainer.epoch_losses = serde_json::from_value(tr.history)?;
    Ok((trainer, loaded.meta))
}

pub fn save_mcm_trainer<T: Scalar>(path: &Path, tr: &McmTrainer<T>, schedule: ScheduleSpec, seed: u64, num_classes: usize) -> Result<()> {
    let mut meta = CheckpointMeta::new(ModelRole::Mcm, tr.mcm.config(), schedule, seed);
    meta.num_classes = Some(num_classes);
    meta.training = Some(TrainingState {
        epochs_done: tr.epochs_done,
        adam: adam_meta(&tr.adam),
        rng: RngState::capture(&tr.rng),
        config: serde_json::to_value(&tr.cfg)?,
        history: serde_json::to_value(&tr.log)?,
    });
    save_model(path, &tr.mcm, Some(&tr.adam), &meta)
}

pub fn load_mcm_trainer<T: Scalar>(path: &Path) -> Result<(McmTrainer<T>, CheckpointMeta)> {
    let loaded = load_model::<T>(path)?;
    let (Some(tr), Some(adam)) = (loaded.meta.training.clone(), loaded.adam) else {
        return Err(fmt("checkpoint carries no training state"));
    };
    if loaded.meta.role != ModelRole::Mcm {
        return Err(fmt("not a conditioning-module checkpoint"));
    }
    let cfg: McmTrainConfig = serde_json::from_value(tr.config)?;
    let mut trainer = McmTrainer::new(loaded.net, loaded.meta.schedule.build()?, cfg)?;
    trainer.adam = adam;
    trainer.rng = tr.rng.restore();
    trainer.epochs_done = tr.epochs_done;
    trainer.log = serde_json::from_value(tr.history)?;
    Ok((trainer, loaded.meta))
}
