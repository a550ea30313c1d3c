//! Cached training pipeline shared by the acceptance suite.
//!
//! Each stage writes its output under the artifact directory and is reused
//! on later runs when present. Delete the directory (or point
//! `MCM_ARTIFACTS` elsewhere) to recompute everything from scratch.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mcm::checkpoint::{load_base_trainer, load_mcm_trainer, load_model, save_base_trainer, save_mcm_trainer};
use mcm::modulation::{ConditionedSet, L1Weight, McmTrainConfig, McmTrainer};
use mcm::synth::{generate_examples, stack_images, to_conditioned_set, PairedExample, SceneParams};
use mcm::training::{BaseTrainConfig, BaseTrainer};
use mcm::{ScheduleSpec, Tensor, UNet, UNetConfig};

pub const BASE_IMAGES: usize = 20_000;
pub const MCM_PAIRS: usize = 5_000;
pub const TRAIN_SEED: u64 = 1_000_000;
pub const TEST_SEED: u64 = 9_000_000;
pub const BASE_INIT_SEED: u64 = 11;
pub const MCM_INIT_SEED: u64 = 12;

pub fn base_train_config() -> BaseTrainConfig {
    BaseTrainConfig { batch_size: 32, epochs: 4, learning_rate: 5e-4, seed: 21 }
}

pub fn mcm_train_config() -> McmTrainConfig {
    McmTrainConfig { epochs: 12, batch_size: 32, learning_rate: 1e-3, seed: 22, ..McmTrainConfig::default() }
}

/// Reduced-epoch paired runs for the L1 ablation.
pub fn ablation_config(lambda_1: L1Weight) -> McmTrainConfig {
    McmTrainConfig { epochs: 4, lambda_1, seed: 23, ..mcm_train_config() }
}

pub fn artifact_dir() -> PathBuf {
    let dir = match std::env::var_os("MCM_ARTIFACTS") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-artifacts"),
    };
    std::fs::create_dir_all(&dir).expect("artifact directory");
    dir
}

pub fn scene_params() -> SceneParams {
    SceneParams::default()
}

pub fn train_examples() -> Vec<PairedExample> {
    generate_examples(&scene_params(), BASE_IMAGES, TRAIN_SEED).expect("training scenes")
}

pub fn test_examples(count: usize) -> Vec<PairedExample> {
    generate_examples(&scene_params(), count, TEST_SEED).expect("test scenes")
}

pub fn sha256_hex(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the trained base as first seen after its training finished.
pub fn base_hash_file() -> PathBuf {
    artifact_dir().join("base.sha256")
}

/// Hash of the base taken right before conditioning run `name` started.
pub fn base_hash_before(name: &str) -> PathBuf {
    artifact_dir().join(format!("{name}.base-before.sha256"))
}

#[derive(Serialize, Deserialize)]
struct Cached<V> {
    key: String,
    value: V,
}

/// JSON-cached result of `compute`, recomputed whenever `key` changes.
pub fn cached<V: Serialize + DeserializeOwned>(name: &str, key: &str, compute: impl FnOnce() -> V) -> V {
    let path = artifact_dir().join(format!("{name}.json"));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(c) = serde_json::from_str::<Cached<V>>(&text) {
            if c.key == key {
                return c.value;
            }
        }
    }
    let value = compute();
    let text = serde_json::to_string_pretty(&Cached { key: key.to_string(), value }).unwrap();
    std::fs::write(&path, &text).unwrap();
    serde_json::from_str::<Cached<V>>(&text).unwrap().value
}

fn progress(tag: &str, epoch: usize, step: usize, loss: f64, start: Instant) {
    eprintln!("[{tag}] epoch {epoch} step {step} loss {loss:.5} ({:.0}s)", start.elapsed().as_secs_f64());
}

/// Trained base checkpoint, training (and resuming per epoch) if needed.
pub fn base_checkpoint() -> PathBuf {
    let dir = artifact_dir();
    let done = dir.join("base.mcmd");
    if done.exists() {
        if !base_hash_file().exists() {
            std::fs::write(base_hash_file(), sha256_hex(&done)).unwrap();
        }
        return done;
    }
    let partial = dir.join("base.partial.mcmd");
    let cfg = base_train_config();
    let schedule = ScheduleSpec::default();
    let mut trainer = if partial.exists() {
        load_base_trainer::<f32>(&partial).expect("resume base training").0
    } else {
        let net = UNet::<f32>::build(&UNetConfig::base_default(), BASE_INIT_SEED).unwrap();
        BaseTrainer::new(net, schedule.build().unwrap(), cfg.clone()).unwrap()
    };
    let data: Tensor<f32> = stack_images(&train_examples()).unwrap();
    let start = Instant::now();
    while trainer.epochs_done < cfg.epochs {
        let epoch = trainer.epochs_done + 1;
        let n = data.shape()[0];
        // Per-step progress: replicate train_epochs one epoch at a time.
        let before = trainer.step_losses.len();
        trainer.train_epochs(&data, 1).unwrap();
        let losses = &trainer.step_losses[before..];
        for (i, chunk) in losses.chunks(100).enumerate() {
            progress("base", epoch, (i + 1) * 100, chunk.iter().sum::<f64>() / chunk.len() as f64, start);
        }
        eprintln!("[base] finished epoch {epoch}/{} over {n} images", cfg.epochs);
        save_base_trainer(&partial, &trainer, schedule, BASE_INIT_SEED).unwrap();
    }
    save_base_trainer(&done, &trainer, schedule, BASE_INIT_SEED).unwrap();
    std::fs::write(base_hash_file(), sha256_hex(&done)).unwrap();
    let _ = std::fs::remove_file(&partial);
    done
}

pub fn load_frozen_base() -> UNet<f32> {
    let mut net = load_model::<f32>(&base_checkpoint()).unwrap().net;
    net.freeze();
    net
}

pub fn mcm_set() -> ConditionedSet<f32> {
    to_conditioned_set(&train_examples()[..MCM_PAIRS]).unwrap()
}

/// Trained conditioning module stored under `name`.
pub fn mcm_checkpoint(name: &str, cfg: &McmTrainConfig) -> PathBuf {
    let dir = artifact_dir();
    let done = dir.join(format!("{name}.mcmd"));
    if done.exists() {
        return done;
    }
    let partial = dir.join(format!("{name}.partial.mcmd"));
    let schedule = ScheduleSpec::default();
    let base = load_frozen_base();
    if !partial.exists() {
        std::fs::write(base_hash_before(name), sha256_hex(&base_checkpoint())).unwrap();
    }
    let mut trainer = if partial.exists() {
        load_mcm_trainer::<f32>(&partial).expect("resume conditioning training").0
    } else {
        let net = UNet::<f32>::build(&UNetConfig::mcm_default(), MCM_INIT_SEED).unwrap();
        McmTrainer::new(net, schedule.build().unwrap(), cfg.clone()).unwrap()
    };
    let data = mcm_set();
    let start = Instant::now();
    while trainer.epochs_done < cfg.epochs {
        trainer.train_epochs(&base, &data, 1).unwrap();
        let log = trainer.log.last().unwrap();
        eprintln!(
            "[{name}] epoch {} loss {:.5} mse {:.5} |gamma|_1 {:.2} |nu|_1 {:.2} ({:.0}s)",
            log.epoch,
            log.loss,
            log.mse,
            log.gamma_l1,
            log.nu_l1,
            start.elapsed().as_secs_f64()
        );
        save_mcm_trainer(&partial, &trainer, schedule, MCM_INIT_SEED, scene_params().num_classes).unwrap();
    }
    save_mcm_trainer(&done, &trainer, schedule, MCM_INIT_SEED, scene_params().num_classes).unwrap();
    let _ = std::fs::remove_file(&partial);
    done
}
