//! Command implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mcm::checkpoint::{
    load_base_trainer, load_mcm_trainer, load_model, save_base_trainer, save_mcm_trainer, CheckpointMeta, LoadedModel,
    ModelRole,
};
use mcm::config::RunConfig;
use mcm::eval::{evaluate, report, ConditionSubset, EvalOptions};
use mcm::modulation::{ConditionedSet, McmTrainer, MODALITY_ORDER};
use mcm::sampler::{modulation_profile, sample as draw, Conditioning};
use mcm::synth::{generate_examples, read_dataset, read_png, stack_images, to_conditioned_set, write_dataset};
use mcm::training::BaseTrainer;
use mcm::{Error, ModalityBundle, Tensor, UNet, VarianceSchedule};

use crate::images::{default_columns, write_grid, write_plot};
use crate::ConfigArgs;

pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

const SNAPSHOT_FILE: &str = "config.resolved";

/// Defaults, then the config file, then `--set`, then command flags.
fn resolve(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = args.set.clone();
    overrides.extend(flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| format!("{k}={v}"))));
    cfg.apply_overrides(&overrides)?;
    Ok(cfg)
}

fn snapshot_beside_file(cfg: &RunConfig, out: &Path) -> CliResult {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    cfg.write_snapshot(&out.with_file_name(format!("{name}.{SNAPSHOT_FILE}")))?;
    Ok(())
}

pub fn gen_data(
    out: &Path,
    count: usize,
    seed: Option<u64>,
    classes: Option<usize>,
    size: Option<usize>,
    args: &ConfigArgs,
) -> CliResult {
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let cfg = resolve(
        args,
        &[
            ("seed", seed.map(|v| v.to_string())),
            ("data.num_classes", classes.map(|v| v.to_string())),
            ("data.image_size", size.map(|v| v.to_string())),
        ],
    )?;
    let examples = generate_examples(&cfg.scene_params()?, count, cfg.seed()?)?;
    write_dataset(&examples, out)?;
    cfg.write_snapshot(&out.join(SNAPSHOT_FILE))?;
    log::info!("wrote {count} examples to {}", out.display());
    Ok(())
}

pub fn train_base(data: &Path, out: &Path, resume: bool, args: &ConfigArgs) -> CliResult {
    let cfg = resolve(args, &[])?;
    let train_cfg = cfg.base_train()?;
    let spec = cfg.schedule_spec()?;
    let init_seed = cfg.seed()?;
    let examples = read_dataset(data)?;
    let images: Tensor<f32> = stack_images(&examples)?;
    let mut trainer = if resume && out.exists() {
        let (mut t, meta) = load_base_trainer::<f32>(out)?;
        if meta.schedule != spec {
            return Err(CliError::Usage("schedule differs from the checkpoint being resumed".into()));
        }
        t.cfg.epochs = train_cfg.epochs;
        t
    } else {
        let net = UNet::<f32>::build(&cfg.base_unet()?, init_seed)?;
        BaseTrainer::new(net, spec.build()?, train_cfg.clone())?
    };
    if trainer.net.config().image_size != images.shape()[2] {
        return Err(CliError::Usage(format!(
            "model is configured for {}px images, data has {}px",
            trainer.net.config().image_size,
            images.shape()[2]
        )));
    }
    snapshot_beside_file(&cfg, out)?;
    log::info!("base model: {} parameters, {} training images", trainer.net.num_parameters(), images.shape()[0]);
    save_base_trainer(out, &trainer, spec, init_seed)?;
    while trainer.epochs_done < train_cfg.epochs {
        trainer.train_epochs(&images, 1)?;
        save_base_trainer(out, &trainer, spec, init_seed)?;
    }
    Ok(())
}

fn load_role(path: &Path, role: ModelRole) -> CliResult<LoadedModel<f32>> {
    let loaded = load_model::<f32>(path)?;
    if loaded.meta.role != role {
        return Err(CliError::Usage(format!("{} is not a {role:?} checkpoint", path.display())));
    }
    Ok(loaded)
}

fn check_pair(base: &CheckpointMeta, mcm: &CheckpointMeta) -> CliResult {
    if base.schedule != mcm.schedule {
        return Err(CliError::Usage("base and conditioning checkpoints use different schedules".into()));
    }
    if base.unet.image_size != mcm.unet.image_size {
        return Err(CliError::Usage("base and conditioning checkpoints use different image sizes".into()));
    }
    if mcm.modality_order != MODALITY_ORDER {
        return Err(CliError::Usage(format!("unsupported modality order {:?}", mcm.modality_order)));
    }
    Ok(())
}

pub fn train_mcm(base_path: &Path, data: &Path, out: &Path, resume: bool, args: &ConfigArgs) -> CliResult {
    let cfg = resolve(args, &[])?;
    let train_cfg = cfg.mcm_train()?;
    let base = load_role(base_path, ModelRole::Base)?;
    let spec = base.meta.schedule;
    let mut base_net = base.net;
    base_net.freeze();
    let mut examples = read_dataset(data)?;
    if let Some(n) = cfg.mcm_max_pairs()? {
        examples.truncate(n);
    }
    let num_classes = examples[0].num_classes;
    let set: ConditionedSet<f32> = to_conditioned_set(&examples)?;
    let init_seed = cfg.seed()?.wrapping_add(3);
    let mut trainer = if resume && out.exists() {
        let (mut t, meta) = load_mcm_trainer::<f32>(out)?;
        check_pair(&base.meta, &meta)?;
        t.cfg.epochs = train_cfg.epochs;
        t
    } else {
        let mut ucfg = cfg.mcm_unet()?;
        ucfg.image_size = base.meta.unet.image_size;
        let net = UNet::<f32>::build(&ucfg, init_seed)?;
        McmTrainer::new(net, spec.build()?, train_cfg.clone())?
    };
    snapshot_beside_file(&cfg, out)?;
    let ratio = trainer.mcm.num_parameters() as f64 / base_net.num_parameters() as f64;
    println!(
        "parameters: conditioning module {}, base {}, ratio {ratio:.4}",
        trainer.mcm.num_parameters(),
        base_net.num_parameters()
    );
    log::info!("training on {} pairs", set.len());
    save_mcm_trainer(out, &trainer, spec, init_seed, num_classes)?;
    while trainer.epochs_done < train_cfg.epochs {
        trainer.train_epochs(&base_net, &set, 1)?;
        save_mcm_trainer(out, &trainer, spec, init_seed, num_classes)?;
    }
    Ok(())
}

/// Read condition PNGs into a bundle sized for the model.
fn load_bundle(seg: Option<&Path>, sketch: Option<&Path>, size: usize, num_classes: usize) -> CliResult<ModalityBundle> {
    let mut bundle = ModalityBundle::empty(size, size, num_classes);
    let gray = |p: &Path| -> CliResult<Vec<u8>> {
        let (w, h, c, data) = read_png(p)?;
        if (w, h, c) != (size, size, 1) {
            return Err(CliError::Usage(format!("{}: expected a {size}x{size} grayscale PNG", p.display())));
        }
        Ok(data)
    };
    if let Some(p) = seg {
        let ids = gray(p)?;
        if let Some(&bad) = ids.iter().find(|&&k| k as usize >= num_classes) {
            return Err(CliError::Usage(format!("{}: class id {bad} >= {num_classes}", p.display())));
        }
        bundle.seg = Some(ids);
    }
    if let Some(p) = sketch {
        bundle.sketch = Some(gray(p)?.iter().map(|&v| v as f32 / 255.0).collect());
    }
    Ok(bundle)
}

fn draw_batched(
    base: &UNet<f32>,
    mcm: Option<&UNet<f32>>,
    bundles: &[ModalityBundle],
    image_shape: &[usize],
    schedule: &VarianceSchedule,
    cfg: &RunConfig,
) -> CliResult<Tensor<f32>> {
    let sample_cfg = cfg.sample_config()?;
    let batch = cfg.sample_batch()?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < bundles.len() {
        let end = (start + batch).min(bundles.len());
        let cond = mcm.map(|m| Conditioning { mcm: m, bundles: &bundles[start..end] });
        parts.push(draw(base, cond, image_shape, start as u64, end - start, schedule, &sample_cfg)?);
        start = end;
    }
    Ok(Tensor::stack0(&parts)?)
}

pub struct SampleArgs {
    pub base: PathBuf,
    pub mcm: Option<PathBuf>,
    pub seg: Option<PathBuf>,
    pub sketch: Option<PathBuf>,
    pub n: usize,
    pub steps: Option<usize>,
    pub eta: Option<f64>,
    pub seed: Option<u64>,
    pub sampler: Option<String>,
    pub out: PathBuf,
}

pub fn sample(a: &SampleArgs, args: &ConfigArgs) -> CliResult {
    let base = load_role(&a.base, ModelRole::Base)?;
    let mut flags = vec![
        ("seed", a.seed.map(|v| v.to_string())),
        ("sample.eta", a.eta.map(|v| v.to_string())),
        ("sample.kind", a.sampler.clone()),
    ];
    // DDPM always runs every step.
    let steps = match (a.sampler.as_deref(), a.steps) {
        (Some("ddpm"), None) => Some(base.meta.schedule.timesteps),
        (_, s) => s,
    };
    flags.push(("sample.steps", steps.map(|v| v.to_string())));
    flags.push(("schedule.timesteps", Some(base.meta.schedule.timesteps.to_string())));
    let cfg = resolve(args, &flags)?;
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    if a.mcm.is_none() && (a.seg.is_some() || a.sketch.is_some()) {
        return Err(CliError::Usage("--seg/--sketch need --mcm".into()));
    }
    let mcm = a.mcm.as_deref().map(|p| load_role(p, ModelRole::Mcm)).transpose()?;
    let size = base.meta.unet.image_size;
    let schedule = base.meta.schedule.build()?;
    let bundles = match &mcm {
        Some(m) => {
            check_pair(&base.meta, &m.meta)?;
            let k = m.meta.num_classes.unwrap_or(cfg.scene_params()?.num_classes);
            let b = load_bundle(a.seg.as_deref(), a.sketch.as_deref(), size, k)?;
            vec![b; a.n]
        }
        None => vec![ModalityBundle::empty(size, size, 2); a.n],
    };
    let image_shape = [base.meta.unet.out_channels, size, size];
    let samples = draw_batched(&base.net, mcm.as_ref().map(|m| &m.net), &bundles, &image_shape, &schedule, &cfg)?;
    fs::create_dir_all(&a.out)?;
    cfg.write_snapshot(&a.out.join(SNAPSHOT_FILE))?;
    write_grid(&a.out.join("grid.png"), &samples, default_columns(a.n))?;
    log::info!("wrote {} samples to {}", a.n, a.out.join("grid.png").display());
    Ok(())
}

pub struct EvalArgs {
    pub base: PathBuf,
    pub mcm: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub per_condition_samples: Option<usize>,
    pub conditions: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

pub fn eval(a: &EvalArgs, args: &ConfigArgs) -> CliResult {
    let base = load_role(&a.base, ModelRole::Base)?;
    let cfg = resolve(
        args,
        &[
            ("seed", a.seed.map(|v| v.to_string())),
            ("sample.steps", a.steps.map(|v| v.to_string())),
            ("eval.per_condition_samples", a.per_condition_samples.map(|v| v.to_string())),
            ("eval.conditions", a.conditions.map(|v| v.to_string())),
            ("schedule.timesteps", Some(base.meta.schedule.timesteps.to_string())),
        ],
    )?;
    let mcm = a.mcm.as_deref().map(|p| load_role(p, ModelRole::Mcm)).transpose()?;
    if let Some(m) = &mcm {
        check_pair(&base.meta, &m.meta)?;
    }
    let mut conditions = read_dataset(&a.data)?;
    conditions.truncate(cfg.eval_conditions()?.max(1));
    let subsets: Vec<ConditionSubset> = if mcm.is_some() {
        ConditionSubset::ALL.to_vec()
    } else {
        vec![ConditionSubset::Unconditional]
    };
    let opts = EvalOptions {
        sample: cfg.sample_config()?,
        per_condition: cfg.per_condition_samples()?,
        batch: cfg.sample_batch()?,
    };
    let schedule = base.meta.schedule.build()?;
    let results = evaluate(&base.net, mcm.as_ref().map(|m| &m.net), &conditions, &subsets, &schedule, &opts)?;
    let rep = report(&results);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, serde_json::to_string_pretty(&rep).map_err(Error::from)? + "\n")?;
    snapshot_beside_file(&cfg, &a.out)?;
    for r in &results {
        let n = r.samples.shape()[0].min(16);
        let grid = r.samples.narrow0(0, n)?;
        let name = r.condition.name().replace('+', "_");
        write_grid(&a.out.with_file_name(format!("eval_{name}.png")), &grid, opts.per_condition.max(1))?;
        let m = &r.metrics;
        println!(
            "{:<11} miou {:.4} accuracy {:.4} sketch_distance {:.3} diversity {} mmd {} n {}",
            r.condition.name(),
            m.miou.unwrap_or(f64::NAN),
            m.accuracy.unwrap_or(f64::NAN),
            m.sketch_distance.unwrap_or(f64::NAN),
            m.diversity.map_or("-".into(), |v| format!("{v:.4}")),
            m.mmd.map_or("-".into(), |v| format!("{v:.4}")),
            m.n
        );
    }
    Ok(())
}

pub struct ProfileArgs {
    pub base: PathBuf,
    pub mcm: PathBuf,
    pub seg: Option<PathBuf>,
    pub sketch: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn profile(a: &ProfileArgs, args: &ConfigArgs) -> CliResult {
    if a.seg.is_none() && a.sketch.is_none() {
        return Err(CliError::Usage("profile needs --seg and/or --sketch".into()));
    }
    let base = load_role(&a.base, ModelRole::Base)?;
    let mcm = load_role(&a.mcm, ModelRole::Mcm)?;
    check_pair(&base.meta, &mcm.meta)?;
    let cfg = resolve(
        args,
        &[
            ("seed", a.seed.map(|v| v.to_string())),
            ("sample.steps", a.steps.map(|v| v.to_string())),
            ("schedule.timesteps", Some(base.meta.schedule.timesteps.to_string())),
        ],
    )?;
    let size = base.meta.unet.image_size;
    let k = mcm.meta.num_classes.unwrap_or(cfg.scene_params()?.num_classes);
    let bundle = load_bundle(a.seg.as_deref(), a.sketch.as_deref(), size, k)?;
    let schedule = base.meta.schedule.build()?;
    let image_shape = [base.meta.unet.out_channels, size, size];
    let bundles = [bundle];
    let cond = Conditioning { mcm: &mcm.net, bundles: &bundles };
    let (final_img, trace) = modulation_profile(&base.net, cond, &image_shape, 0, 1, &schedule, &cfg.sample_config()?)?;
    fs::create_dir_all(&a.out)?;
    cfg.write_snapshot(&a.out.join(SNAPSHOT_FILE))?;
    let mut csv = String::from("step,t,mean_abs_gamma,mean_abs_nu\n");
    for s in &trace {
        csv.push_str(&format!("{},{},{:.8e},{:.8e}\n", s.step, s.t, s.mean_abs_gamma, s.mean_abs_nu));
    }
    fs::write(a.out.join("profile.csv"), csv)?;
    let gamma: Vec<f64> = trace.iter().map(|s| s.mean_abs_gamma).collect();
    let nu: Vec<f64> = trace.iter().map(|s| s.mean_abs_nu).collect();
    write_plot(&a.out.join("curve.png"), &[(&gamma, [31, 119, 180]), (&nu, [214, 39, 40])])?;
    // Two rows: frozen-model estimate and modulated estimate at evenly spaced steps.
    let cols = trace.len().min(10);
    let picks: Vec<usize> = (0..cols).map(|i| i * (trace.len() - 1) / (cols - 1).max(1)).collect();
    let mut tiles: Vec<Tensor<f32>> = picks.iter().map(|&i| trace[i].x0_base.clone()).collect();
    tiles.extend(picks.iter().map(|&i| trace[i].x0.clone()));
    write_grid(&a.out.join("strip.png"), &Tensor::stack0(&tiles)?, cols)?;
    write_grid(&a.out.join("final.png"), &final_img, 1)?;
    log::info!("profile of {} steps written to {}", trace.len(), a.out.display());
    Ok(())
}
