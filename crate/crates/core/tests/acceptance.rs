//! End-to-end acceptance checks, one line per criterion.
//!
//! Expensive stages (base training, conditioning-module training, large
//! evaluations) are cached under the artifact directory; see `common`.
//! Set `MCM_CRITERIA=1,5,6` to run a subset.

mod common;
mod gradcheck;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use mcm::checkpoint::{load_model, save_model};
use mcm::denoiser::MlpConfig;
use mcm::diffusion::{forward_noise, predict_x0};
use mcm::eval::{evaluate, report, ConditionSubset, EvalOptions, EvalReport, SubsetResult};
use mcm::modulation::{L1Weight, McmTrainer};
use mcm::rng::seeded;
use mcm::sampler::{ddim_step, ddim_step_with_noise, ddpm_step_with_noise, modulation_profile};
use mcm::synth::{image_to_rgb8, write_png, PairedExample, PngColor};
use mcm::training::{epsilon_loss, BaseTrainConfig, BaseTrainer};
use mcm::{
    sample, Conditioning, McmTrainConfig, SampleConfig, ScalarMlp, ScheduleSpec, Tensor, UNet, UNetConfig,
    VarianceSchedule,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

const EVAL_SEED: u64 = 31_337;
const EVAL_CONDITIONS: usize = 200;
const EVAL_SAMPLES: usize = 2;
/// DDIM steps for the large evaluation; see the README for the cost trade-off.
const EVAL_STEPS: usize = 50;
const ABLATION_CONDITIONS: usize = 60;
const SAMPLER_CONDITIONS: usize = 12;
const PROFILE_CONDITIONS: usize = 4;
const IMAGE: [usize; 3] = [3, 32, 32];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn schedule() -> VarianceSchedule {
    ScheduleSpec::default().build().unwrap()
}

fn same_bits(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn trained_mcm() -> UNet<f32> {
    load_model::<f32>(&common::mcm_checkpoint("mcm", &common::mcm_train_config())).unwrap().net
}

fn eval_conditions(n: usize) -> Vec<PairedExample> {
    common::test_examples(n)
}

/// Rows: reference image, then one row per subset; `cols` conditions.
fn write_eval_grid(path: &Path, conditions: &[PairedExample], results: &[SubsetResult<f32>], per: usize, cols: usize) {
    let (h, w, gap) = (IMAGE[1], IMAGE[2], 2);
    let rows = 1 + results.len();
    let (gw, gh) = (cols * (w + gap) - gap, rows * (h + gap) - gap);
    let mut px = vec![255u8; gw * gh * 3];
    let mut put = |r: usize, c: usize, img: &Tensor<f32>| {
        let rgb = image_to_rgb8(img);
        for y in 0..h {
            let dst = ((r * (h + gap) + y) * gw + c * (w + gap)) * 3;
            px[dst..dst + w * 3].copy_from_slice(&rgb[y * w * 3..(y + 1) * w * 3]);
        }
    };
    for (c, cond) in conditions.iter().take(cols).enumerate() {
        put(0, c, &cond.image);
        for (r, res) in results.iter().enumerate() {
            let img = res.samples.narrow0(c * per, c * per + 1).unwrap().reshape(&IMAGE).unwrap();
            put(r + 1, c, &img);
        }
    }
    write_png(path, gw, gh, PngColor::Rgb, &px).unwrap();
}

fn eval_cached(
    name: &str,
    mcm_path: &Path,
    conditions: usize,
    per: usize,
    subsets: &[ConditionSubset],
    cfg: SampleConfig,
) -> EvalReport {
    let key = format!(
        "{}:{}:{conditions}x{per}:{subsets:?}:{cfg:?}",
        common::sha256_hex(&common::base_checkpoint()),
        common::sha256_hex(mcm_path)
    );
    common::cached(name, &key, || {
        let base = common::load_frozen_base();
        let mcm = load_model::<f32>(mcm_path).unwrap().net;
        let conds = eval_conditions(conditions);
        let opts = EvalOptions { sample: cfg, per_condition: per, batch: 16 };
        let start = Instant::now();
        let results = evaluate(&base, Some(&mcm), &conds, subsets, &schedule(), &opts).unwrap();
        eprintln!("[{name}] sampled in {:.0}s", start.elapsed().as_secs_f64());
        write_eval_grid(&common::artifact_dir().join(format!("{name}.png")), &conds, &results, per, 8);
        report(&results)
    })
}

fn main_eval() -> EvalReport {
    let mcm = common::mcm_checkpoint("mcm", &common::mcm_train_config());
    eval_cached(
        "eval_main",
        &mcm,
        EVAL_CONDITIONS,
        EVAL_SAMPLES,
        &ConditionSubset::ALL,
        SampleConfig::ddim(EVAL_STEPS, 0.0, EVAL_SEED),
    )
}

fn c1_identity_at_init() -> Outcome {
    let base = common::load_frozen_base();
    let mcm = UNet::<f32>::build(&UNetConfig::mcm_default(), common::MCM_INIT_SEED).unwrap();
    let conds = eval_conditions(2);
    let bundles: Vec<_> = conds.iter().map(|c| c.bundle()).collect();
    let cfg = SampleConfig::ddim(200, 0.0, EVAL_SEED);
    let s = schedule();
    let plain = sample(&base, None, &IMAGE, 0, 2, &s, &cfg).unwrap();
    let modulated = sample(&base, Some(Conditioning { mcm: &mcm, bundles: &bundles }), &IMAGE, 0, 2, &s, &cfg).unwrap();
    let same = same_bits(&plain, &modulated);
    outcome(same, format!("DDIM(200, eta 0) on 2 conditioned samples: bit-identical = {same}"))
}

fn c2_frozen_base() -> Outcome {
    let base_path = common::base_checkpoint();
    common::mcm_checkpoint("mcm", &common::mcm_train_config());
    let read = |p: &Path| std::fs::read_to_string(p).ok().map(|s| s.trim().to_string());
    let trained = read(&common::base_hash_file());
    let before = read(&common::base_hash_before("mcm"));
    let now = common::sha256_hex(&base_path);

    // A further live run: train against the checkpoint and re-serialize it.
    let loaded = load_model::<f32>(&base_path).unwrap();
    let mut frozen = loaded.net.clone();
    frozen.freeze();
    let cfg = McmTrainConfig { epochs: 1, ..common::mcm_train_config() };
    let mut tr = McmTrainer::new(UNet::build(&UNetConfig::mcm_default(), 5).unwrap(), schedule(), cfg).unwrap();
    tr.train_epochs(&frozen, &common::mcm_set().subset(0..128).unwrap(), 1).unwrap();
    let tmp = tempfile::NamedTempFile::new().unwrap();
    save_model(tmp.path(), &frozen, loaded.adam.as_ref(), &loaded.meta).unwrap();
    let reserialized = std::fs::read(tmp.path()).unwrap() == std::fs::read(&base_path).unwrap();
    let after = common::sha256_hex(&base_path);

    let pass = trained.as_deref() == Some(now.as_str())
        && before.as_deref() == Some(now.as_str())
        && after == now
        && reserialized;
    outcome(
        pass,
        format!(
            "sha256 {}.. at base completion {:?}, before module training {:?}, after live run {}, re-serialized identical {}",
            &now[..12],
            trained.map(|h| h == now),
            before.map(|h| h == now),
            after == now,
            reserialized
        ),
    )
}

fn c3_gradients() -> Outcome {
    let results = gradcheck::run_all();
    let worst32 = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let worst64 = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let bad: Vec<_> = results.iter().filter(|r| !(r.1 <= gradcheck::TOL && r.2 <= gradcheck::TOL)).map(|r| r.0).collect();
    outcome(
        results.len() >= 20 && bad.is_empty(),
        format!(
            "{} compositions, worst relative error f32 {worst32:.2e}, f64 {worst64:.2e} (limit {:.0e}){}",
            results.len(),
            gradcheck::TOL,
            if bad.is_empty() { String::new() } else { format!(", failing {bad:?}") }
        ),
    )
}

fn c4_forward_moments() -> Outcome {
    let s = schedule();
    let x0 = Tensor::<f64>::from_f64(&[4], &[0.5, -0.3, 0.9, 0.0]).unwrap();
    let n = 10_000;
    let mut rng = seeded(404);
    let mut pass = true;
    let mut notes = Vec::new();
    for t in [1, s.timesteps() / 2, s.timesteps()] {
        let ab = s.alpha_bar(t);
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| forward_noise(&x0, t, &Tensor::randn(&[4], &mut rng), &s).unwrap().to_f64_vec())
            .collect();
        let (mut worst_z, mut worst_v) = (0.0f64, 0.0f64);
        for p in 0..4 {
            let mean = draws.iter().map(|d| d[p]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[p] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = ((1.0 - ab) / n as f64).sqrt();
            worst_z = worst_z.max((mean - ab.sqrt() * x0.data()[p]).abs() / se);
            worst_v = worst_v.max((var / (1.0 - ab) - 1.0).abs());
        }
        pass &= worst_z <= 4.0 && worst_v <= 0.05;
        notes.push(format!("t={t}: |mean err| {worst_z:.2} SE, var err {:.1}%", 100.0 * worst_v));
    }
    outcome(pass, notes.join("; "))
}

fn c5_sampler_math() -> Outcome {
    let s = VarianceSchedule::from_betas(vec![0.5, 0.5]).unwrap();
    let one = Tensor::<f64>::ones(&[1]);
    let xt = forward_noise(&one, 2, &one, &s).unwrap();
    let mut checks = vec![
        ("alpha_bar [0.5, 0.25]", (s.alpha_bar(1) - 0.5).abs().max((s.alpha_bar(2) - 0.25).abs())),
        ("forward_noise 1.3660", (xt.data()[0] - (0.5 + 0.75f64.sqrt())).abs()),
        ("predict_x0 1.0", (predict_x0(&xt, &one, 2, &s).unwrap().data()[0] - 1.0).abs()),
    ];
    let step = ddim_step_with_noise(&xt, &one, 2, 1, &s, 0.0, false, None).unwrap();
    checks.push(("ddim 1.4142", (step.data()[0] - 2.0f64.sqrt()).abs()));
    let (x, e, z): (Tensor<f64>, Tensor<f64>, Tensor<f64>) = (Tensor::from_f64(&[1], &[0.8]).unwrap(), Tensor::from_f64(&[1], &[0.7]).unwrap(), Tensor::from_f64(&[1], &[-0.4]).unwrap());
    let ddpm = ddpm_step_with_noise(&x, &e, 2, &s, false, Some(&z)).unwrap();
    let expected = (0.8 - 0.5 / 0.75f64.sqrt() * 0.7) / 0.5f64.sqrt() + (0.5f64 * 0.5 / 0.75).sqrt() * -0.4;
    checks.push(("ddpm hand case", (ddpm.data()[0] - expected).abs()));
    let hand_ok = checks.iter().all(|(_, err)| *err <= 1e-5);

    let d = schedule();
    let mut rng = seeded(55);
    let x = Tensor::<f32>::randn(&IMAGE, &mut rng);
    let eps = Tensor::<f32>::randn(&IMAGE, &mut rng);
    let a = ddim_step(&x, &eps, 600, 595, &d, 0.0, true, &mut seeded(1)).unwrap();
    let b = ddim_step(&x, &eps, 600, 595, &d, 0.0, true, &mut seeded(2)).unwrap();
    let step_bits = same_bits(&a, &b);
    let base = common::load_frozen_base();
    let cfg = SampleConfig::ddim(20, 0.0, 7);
    let run1 = sample(&base, None, &IMAGE, 0, 2, &d, &cfg).unwrap();
    let run2 = sample(&base, None, &IMAGE, 0, 2, &d, &cfg).unwrap();
    let sample_bits = same_bits(&run1, &run2);

    let x0 = Tensor::<f64>::randn(&[256], &mut rng).map(|v| v.clamp(-1.0, 1.0));
    let mut round_trip = 0.0f64;
    for t in 1..=d.timesteps() {
        let e = Tensor::<f64>::randn(&[256], &mut rng);
        let back = predict_x0(&forward_noise(&x0, t, &e, &d).unwrap(), &e, t, &d).unwrap();
        round_trip = round_trip.max(back.max_abs_diff(&x0).unwrap());
    }
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    outcome(
        hand_ok && step_bits && sample_bits && round_trip <= 1e-5,
        format!(
            "{} hand cases, worst error {worst:.1e}; eta 0 step bit-identical {step_bits}, sampling bit-identical {sample_bits}; round trip max error {round_trip:.1e} over all t",
            checks.len()
        ),
    )
}

fn c6_gaussian_oracle() -> Outcome {
    let (mu, sigma) = (0.3f64, 0.5f64);
    let mut rng = seeded(606);
    let draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor::<f32>::randn(&[n, 1, 1, 1], rng).map(|v| mu as f32 + sigma as f32 * v)
    };
    let data = draw(50_000, &mut rng);
    let s = schedule();
    let net = ScalarMlp::<f32>::build(&MlpConfig { hidden: 64, time_embed_dim: 32 }, 2).unwrap();
    let (epochs, lr) = (40, 3e-3);
    let cfg = BaseTrainConfig { batch_size: 500, epochs, learning_rate: lr, seed: 3 };
    let mut tr = BaseTrainer::new(net, s.clone(), cfg).unwrap();
    for e in 0..epochs {
        if e == epochs * 3 / 4 {
            tr.adam.lr = lr * 0.1;
        }
        tr.train_epochs(&data, 1).unwrap();
    }
    let m = 20_000;
    let x0 = draw(m, &mut rng);
    let ts: Vec<usize> = (0..m).map(|_| rng.random_range(1..=s.timesteps())).collect();
    let eps = Tensor::<f32>::randn(&[m, 1, 1, 1], &mut rng);
    let loss = epsilon_loss(&tr.net, &x0, &ts, &eps, &s).unwrap().value().data()[0] as f64;
    // E[eps | x_t] is linear for Gaussian data; its error is abar s^2 / (abar s^2 + 1 - abar).
    let optimal = ts
        .iter()
        .map(|&t| {
            let ab = s.alpha_bar(t);
            ab * sigma * sigma / (ab * sigma * sigma + 1.0 - ab)
        })
        .sum::<f64>()
        / m as f64;
    let mut scfg = SampleConfig::ddim(200, 0.0, 61);
    scfg.static_threshold = false;
    let out = sample(&tr.net, None, &[1, 1, 1], 0, 4000, &s, &scfg).unwrap().to_f64_vec();
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let sd = (out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (out.len() - 1) as f64).sqrt();
    let ratio = loss / optimal;
    outcome(
        ratio <= 1.1 && (mean - mu).abs() <= 0.05 && (sd / sigma - 1.0).abs() <= 0.1,
        format!("eps-MSE {loss:.4} vs optimal {optimal:.4} (x{ratio:.3}); 4000 DDIM samples mean {mean:.3}, sd {sd:.3}"),
    )
}

fn metric(r: &EvalReport, c: ConditionSubset, f: fn(&mcm::metrics::MetricsReport) -> Option<f64>) -> f64 {
    r.row(c).and_then(f).unwrap_or(f64::NAN)
}

fn miou(m: &mcm::metrics::MetricsReport) -> Option<f64> {
    m.miou
}

fn sketch(m: &mcm::metrics::MetricsReport) -> Option<f64> {
    m.sketch_distance
}

fn diversity(m: &mcm::metrics::MetricsReport) -> Option<f64> {
    m.diversity
}

fn c7_alignment() -> Outcome {
    let r = main_eval();
    use ConditionSubset::*;
    let (mu, ms) = (metric(&r, Unconditional, miou), metric(&r, Seg, miou));
    let (su, ss) = (metric(&r, Unconditional, sketch), metric(&r, Sketch, sketch));
    outcome(
        ms >= mu + 0.15 && ss <= 0.6 * su,
        format!(
            "mIoU none {mu:.3} -> seg {ms:.3} (need >= {:.3}); sketch distance none {su:.3} -> sketch {ss:.3} (need <= {:.3})",
            mu + 0.15,
            0.6 * su
        ),
    )
}

fn c8_diversity() -> Outcome {
    let r = main_eval();
    use ConditionSubset::*;
    let du = metric(&r, Unconditional, diversity);
    let conditioned = [Seg, Sketch, Both].map(|c| metric(&r, c, diversity));
    let dc = conditioned.iter().sum::<f64>() / 3.0;
    outcome(
        dc >= 0.3 * du,
        format!(
            "diversity none {du:.4}, conditioned mean {dc:.4} (seg {:.4}, sketch {:.4}, both {:.4}); ratio {:.2} (need >= 0.3)",
            conditioned[0],
            conditioned[1],
            conditioned[2],
            dc / du
        ),
    )
}

fn c9_l1_ablation() -> Outcome {
    let with = common::mcm_checkpoint("ablation_l1", &common::ablation_config(L1Weight::Auto));
    let without = common::mcm_checkpoint("ablation_nol1", &common::ablation_config(L1Weight::Fixed(0.0)));
    let subsets = [ConditionSubset::Both];
    let cfg = SampleConfig::ddim(EVAL_STEPS, 0.0, EVAL_SEED);
    let a = eval_cached("eval_ablation_l1", &with, ABLATION_CONDITIONS, 2, &subsets, cfg.clone());
    let b = eval_cached("eval_ablation_nol1", &without, ABLATION_CONDITIONS, 2, &subsets, cfg);
    let (ma, mb) = (metric(&a, ConditionSubset::Both, miou), metric(&b, ConditionSubset::Both, miou));
    let (da, db) = (metric(&a, ConditionSubset::Both, diversity), metric(&b, ConditionSubset::Both, diversity));
    outcome(
        mb >= ma && db <= da,
        format!("lambda_1 = 0: mIoU {mb:.3}, diversity {db:.4}; default: mIoU {ma:.3}, diversity {da:.4}"),
    )
}

#[derive(Serialize, Deserialize)]
struct ProfileRow {
    step: usize,
    t: usize,
    gamma: f64,
    nu: f64,
}

fn write_curve(path: &Path, rows: &[ProfileRow]) {
    let (w, h) = (rows.len(), 120usize);
    let mut px = vec![255u8; w * h * 3];
    let gmax = rows.iter().map(|r| r.gamma.max(r.nu)).fold(f64::MIN_POSITIVE, f64::max);
    for (x, r) in rows.iter().enumerate() {
        for (v, rgb) in [(r.gamma, [31u8, 119, 180]), (r.nu, [214, 39, 40])] {
            let y = h - 1 - ((v / gmax) * (h - 1) as f64).round() as usize;
            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb);
        }
    }
    write_png(path, w, h, PngColor::Rgb, &px).unwrap();
}

fn c10_profile() -> Outcome {
    let mcm_path = common::mcm_checkpoint("mcm", &common::mcm_train_config());
    let key = format!("{}:{}:{PROFILE_CONDITIONS}", common::sha256_hex(&common::base_checkpoint()), common::sha256_hex(&mcm_path));
    let rows: Vec<ProfileRow> = common::cached("profile", &key, || {
        let base = common::load_frozen_base();
        let mcm = trained_mcm();
        let bundles: Vec<_> = eval_conditions(PROFILE_CONDITIONS).iter().map(|c| c.bundle()).collect();
        let cond = Conditioning { mcm: &mcm, bundles: &bundles };
        let cfg = SampleConfig::ddim(200, 0.0, EVAL_SEED);
        let (_, trace) = modulation_profile(&base, cond, &IMAGE, 0, PROFILE_CONDITIONS, &schedule(), &cfg).unwrap();
        trace.iter().map(|p| ProfileRow { step: p.step, t: p.t, gamma: p.mean_abs_gamma, nu: p.mean_abs_nu }).collect()
    });
    let dir = common::artifact_dir();
    let mut csv = String::from("step,t,mean_abs_gamma,mean_abs_nu\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{:.8e},{:.8e}\n", r.step, r.t, r.gamma, r.nu));
    }
    std::fs::write(dir.join("profile.csv"), csv).unwrap();
    write_curve(&dir.join("profile.png"), &rows);
    let peak = (0..rows.len()).max_by(|&a, &b| rows[a].gamma.total_cmp(&rows[b].gamma)).unwrap();
    let limit = rows.len() * 3 / 4;
    outcome(
        peak < limit,
        format!(
            "mean|gamma| peaks at step {peak} of {} (t = {}, value {:.4}); must be < {limit}; curve in {}",
            rows.len(),
            rows[peak].t,
            rows[peak].gamma,
            dir.join("profile.png").display()
        ),
    )
}

fn c11_subsets() -> Outcome {
    let r = main_eval();
    use ConditionSubset::*;
    let present = ConditionSubset::ALL.iter().all(|&c| r.row(c).is_some());
    let none = (metric(&r, Unconditional, miou), metric(&r, Unconditional, sketch));
    let seg = metric(&r, Seg, miou);
    let sk = metric(&r, Sketch, sketch);
    let both = (metric(&r, Both, miou), metric(&r, Both, sketch));
    let pass = present && seg > none.0 && sk < none.1 && both.0 > none.0 && both.1 < none.1;
    outcome(
        pass,
        format!(
            "rows {:?}; seg mIoU {seg:.3} vs {:.3}; sketch distance {sk:.3} vs {:.3}; both mIoU {:.3}, distance {:.3}",
            r.rows.iter().map(|x| x.condition.name()).collect::<Vec<_>>(),
            none.0,
            none.1,
            both.0,
            both.1
        ),
    )
}

fn c12_samplers() -> Outcome {
    let mcm = common::mcm_checkpoint("mcm", &common::mcm_train_config());
    let subsets = [ConditionSubset::Unconditional, ConditionSubset::Both];
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, cfg) in [
        ("ddpm", SampleConfig::ddpm(schedule().timesteps(), EVAL_SEED)),
        ("ddim200", SampleConfig::ddim(200, 0.0, EVAL_SEED)),
    ] {
        let r = eval_cached(&format!("eval_{name}"), &mcm, SAMPLER_CONDITIONS, 1, &subsets, cfg);
        let (mu, mb) = (metric(&r, ConditionSubset::Unconditional, miou), metric(&r, ConditionSubset::Both, miou));
        let (su, sb) = (metric(&r, ConditionSubset::Unconditional, sketch), metric(&r, ConditionSubset::Both, sketch));
        // Non-finite samples abort sampling, so finite metrics imply finite images.
        let ok = [mu, mb, su, sb].iter().all(|v| v.is_finite()) && mb > mu && sb < su;
        pass &= ok;
        notes.push(format!("{name}: mIoU {mu:.3} -> {mb:.3}, sketch distance {su:.3} -> {sb:.3}"));
    }
    outcome(pass, notes.join("; "))
}

type Criterion = (u32, &'static str, bool, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "identity at init", false, c1_identity_at_init),
        (2, "frozen base", false, c2_frozen_base),
        (3, "autodiff vs finite differences", false, c3_gradients),
        (4, "forward-process moments", false, c4_forward_moments),
        (5, "sampler math", false, c5_sampler_math),
        (6, "Gaussian oracle", false, c6_gaussian_oracle),
        (7, "alignment", false, c7_alignment),
        (8, "non-collapse diversity", false, c8_diversity),
        (9, "L1 ablation trend", true, c9_l1_ablation),
        (10, "modulation profile", true, c10_profile),
        (11, "modality subsets", false, c11_subsets),
        (12, "sampler interchangeability", false, c12_samplers),
    ];
    let selected: Option<Vec<u32>> = std::env::var("MCM_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut lines = Vec::new();
    let mut hard_failures = 0;
    for (id, title, soft, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let status = match (result.pass, soft) {
            (true, _) => "PASS",
            (false, true) => "FLAG",
            (false, false) => "FAIL",
        };
        if !result.pass && !soft {
            hard_failures += 1;
        }
        let line = format!(
            "criterion {id:>2} {status} {title}{}: {} [{:.1}s]",
            if soft { " (soft)" } else { "" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        let _ = std::io::stdout().flush();
        lines.push(line);
    }
    let summary = lines.join("\n") + "\n";
    std::fs::write(common::artifact_dir().join("acceptance-report.txt"), summary).unwrap();
    if hard_failures > 0 {
        println!("{hard_failures} hard criterion failure(s)");
        std::process::exit(1);
    }
}
