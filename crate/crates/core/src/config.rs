//! Plain `key = value` run configuration.
//!
//! Every key has a default; files and overrides may only set known keys.
//! [`RunConfig::snapshot`] renders the fully resolved configuration, which
//! parses back to the same values.

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::modulation::{DropoutProbs, L1Weight, McmTrainConfig, MODALITY_ORDER};
use crate::sampler::{SampleConfig, SamplerKind};
use crate::synth::SceneParams;
use crate::training::BaseTrainConfig;
use crate::unet::UNetConfig;

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("data.num_classes", "6", "segmentation classes K"),
    ("data.image_size", "32", "image height and width"),
    ("data.min_shapes", "1", "fewest shapes per scene"),
    ("data.max_shapes", "4", "most shapes per scene"),
    ("schedule.timesteps", "1000", "diffusion steps T"),
    ("schedule.beta_start", "0.0001", "first beta"),
    ("schedule.beta_end", "0.02", "last beta"),
    ("base.channels", "32", "base model width"),
    ("base.multipliers", "1,2,4,4", "base model channel multipliers per level"),
    ("base.res_blocks", "2", "base model residual blocks per level"),
    ("base.attention", "16", "base model attention resolutions"),
    ("base.time_embed_dim", "128", "base model time embedding width"),
    ("base.norm_groups", "8", "base model group-norm groups"),
    ("base.epochs", "20", "base training epochs"),
    ("base.batch_size", "32", "base training batch size"),
    ("base.lr", "0.0002", "base training learning rate"),
    ("mcm.channels", "16", "conditioning module width"),
    ("mcm.multipliers", "1,1,2", "conditioning module channel multipliers"),
    ("mcm.res_blocks", "2", "conditioning module residual blocks per level"),
    ("mcm.attention", "16", "conditioning module attention resolutions"),
    ("mcm.time_embed_dim", "64", "conditioning module time embedding width"),
    ("mcm.norm_groups", "8", "conditioning module group-norm groups"),
    ("mcm.epochs", "10", "conditioning module training epochs"),
    ("mcm.batch_size", "32", "conditioning module batch size"),
    ("mcm.lr", "0.001", "conditioning module learning rate"),
    ("mcm.lambda_x", "1", "weight of the reconstruction term"),
    ("mcm.lambda_1", "auto", "weight of the L1 term; auto = 1/(b*h*w*c)"),
    ("mcm.p_seg", "0.33", "segmentation dropout probability"),
    ("mcm.p_sketch", "0.33", "sketch dropout probability"),
    ("mcm.static_threshold", "true", "clamp x0' to [-1, 1] in the loss"),
    ("mcm.max_pairs", "0", "train on at most this many pairs; 0 = all"),
    ("sample.steps", "200", "sampling steps N"),
    ("sample.eta", "0", "DDIM eta"),
    ("sample.kind", "ddim", "ddim or ddpm"),
    ("sample.static_threshold", "true", "clamp x0' to [-1, 1] while sampling"),
    ("sample.bypass", "true", "skip the conditioning module when no modality is given"),
    ("sample.batch", "16", "samples evaluated together"),
    ("eval.conditions", "200", "held-out conditions scored by eval"),
    ("eval.per_condition_samples", "2", "samples drawn per condition and subset"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Parse `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{}'", i + 1, raw.trim())))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Apply `key=value` overrides, then re-check every typed section.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Resolved configuration, one sorted `key = value` line per key.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.snapshot())?;
        Ok(())
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key from the table")
    }

    fn num<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.raw(key).parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{}'", self.raw(key))))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
        }
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.raw(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{raw}'"))))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_params()?.validate().map_err(cfg_err)?;
        self.schedule_spec()?.build().map_err(cfg_err)?;
        self.base_unet()?.validate().map_err(cfg_err)?;
        self.mcm_unet()?.validate().map_err(cfg_err)?;
        self.base_train()?;
        self.mcm_train()?.validate().map_err(cfg_err)?;
        self.sample_config()?.validate(&self.schedule_spec()?.build()?).map_err(cfg_err)?;
        if self.num::<usize>("sample.batch")? == 0 || self.num::<usize>("eval.per_condition_samples")? == 0 {
            return Err(Error::Config("batch and sample counts must be positive".into()));
        }
        self.eval_conditions()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.num("seed")
    }

    pub fn scene_params(&self) -> Result<SceneParams> {
        Ok(SceneParams {
            image_size: self.num("data.image_size")?,
            num_classes: self.num("data.num_classes")?,
            min_shapes: self.num("data.min_shapes")?,
            max_shapes: self.num("data.max_shapes")?,
        })
    }

    pub fn schedule_spec(&self) -> Result<ScheduleSpec> {
        Ok(ScheduleSpec {
            timesteps: self.num("schedule.timesteps")?,
            beta_start: self.num("schedule.beta_start")?,
            beta_end: self.num("schedule.beta_end")?,
        })
    }

    fn unet(&self, prefix: &str, in_channels: usize, out_heads: usize) -> Result<UNetConfig> {
        Ok(UNetConfig {
            in_channels,
            out_channels: 3,
            base_channels: self.num(&format!("{prefix}.channels"))?,
            channel_multipliers: self.list(&format!("{prefix}.multipliers"))?,
            res_blocks_per_level: self.num(&format!("{prefix}.res_blocks"))?,
            attention_resolutions: self.list(&format!("{prefix}.attention"))?,
            out_heads,
            time_embed_dim: self.num(&format!("{prefix}.time_embed_dim"))?,
            norm_groups: self.num(&format!("{prefix}.norm_groups"))?,
            image_size: self.num("data.image_size")?,
        })
    }

    pub fn base_unet(&self) -> Result<UNetConfig> {
        self.unet("base", 3, 1)
    }

    pub fn mcm_unet(&self) -> Result<UNetConfig> {
        self.unet("mcm", 3 + 3 + MODALITY_ORDER.len(), 2)
    }

    pub fn base_train(&self) -> Result<BaseTrainConfig> {
        let cfg = BaseTrainConfig {
            batch_size: self.num("base.batch_size")?,
            epochs: self.num("base.epochs")?,
            learning_rate: self.num("base.lr")?,
            seed: self.seed()?.wrapping_add(1),
        };
        if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
            return Err(Error::Config("base.batch_size and base.lr must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn mcm_train(&self) -> Result<McmTrainConfig> {
        let lambda_1 = match self.raw("mcm.lambda_1") {
            "auto" => L1Weight::Auto,
            _ => L1Weight::Fixed(self.num("mcm.lambda_1")?),
        };
        Ok(McmTrainConfig {
            lambda_x: self.num("mcm.lambda_x")?,
            lambda_1,
            dropout: DropoutProbs { seg: self.num("mcm.p_seg")?, sketch: self.num("mcm.p_sketch")? },
            batch_size: self.num("mcm.batch_size")?,
            epochs: self.num("mcm.epochs")?,
            learning_rate: self.num("mcm.lr")?,
            seed: self.seed()?.wrapping_add(2),
            static_threshold: self.flag("mcm.static_threshold")?,
        })
    }

    pub fn sample_config(&self) -> Result<SampleConfig> {
        Ok(SampleConfig {
            num_steps: self.num("sample.steps")?,
            eta: self.num("sample.eta")?,
            kind: self.raw("sample.kind").parse::<SamplerKind>()?,
            seed: self.seed()?,
            static_threshold: self.flag("sample.static_threshold")?,
            bypass: self.flag("sample.bypass")?,
        })
    }

    /// `None` means every available pair.
    pub fn mcm_max_pairs(&self) -> Result<Option<usize>> {
        let n: usize = self.num("mcm.max_pairs")?;
        Ok((n > 0).then_some(n))
    }

    pub fn sample_batch(&self) -> Result<usize> {
        self.num("sample.batch")
    }

    pub fn eval_conditions(&self) -> Result<usize> {
        self.num("eval.conditions")
    }

    pub fn per_condition_samples(&self) -> Result<usize> {
        self.num("eval.per_condition_samples")
    }
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}
