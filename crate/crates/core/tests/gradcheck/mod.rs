//! Finite-difference oracle for the autodiff engine.
//!
//! Every composition is evaluated in both precisions; the reference
//! differences are always taken in f64 with h = 1e-3, and the error of a
//! gradient is `|g - g_fd| / max(|g|, |g_fd|, 1e-4)` over the probed
//! coordinates. The floor covers inputs whose true gradient is exactly zero,
//! such as the key bias of softmax attention.

#![allow(dead_code)]

use mcm::diffusion::{forward_noise_batch, predict_x0_batch, static_threshold, VarianceSchedule};
use mcm::kernels::{
    add_channel_bias, attention2d, avg_pool2, conv2d, group_norm, linear, nearest_upsample2, silu,
    sinusoidal_time_embedding, spatial_attention, AttentionWeights,
};
use mcm::modulation::{mcm_loss, modulate, L1Weight};
use mcm::rng::seeded;
use mcm::{backward, ModulationParams, ParamStore, Result, Scalar, Tensor, Var};
use rand::Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const GRAD_FLOOR: f64 = 1e-4;
pub const MAX_PROBES: usize = 48;

pub type Comp<T> = fn(&[Var<T>]) -> Result<Var<T>>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f32: Comp<f32>,
    pub f64: Comp<f64>,
}

macro_rules! case {
    ($name:literal, [$($s:expr),* $(,)?], $f:ident) => {
        Case { name: $name, shapes: vec![$($s.to_vec()),*], f32: $f::<f32>, f64: $f::<f64> }
    };
}

fn c<T: Scalar>(v: f64) -> T {
    T::of(v)
}

fn add_mul_broadcast<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    v[0].add(&v[1])?.mul(&v[0])
}

fn sub_div<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    v[0].sub(&v[1])?.div(&v[1])
}

fn scalar_chain<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    v[0].add_scalar(c(0.3))?.mul_scalar(c(-1.7))?.neg()?.square()
}

fn abs_mean<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    v[0].mul(&v[1])?.abs()?.mean()
}

fn clamp_band<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    v[0].mul_scalar(c(1.6))?.clamp(c(-1.0), c(1.0))?.mul(&v[0])
}

fn concat_reshape<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    Var::concat1(&[&v[0], &v[1]])?.reshape(&[10])?.square()?.sum()
}

fn three_layer_mlp<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let h = silu(&linear(&v[0], &v[1], Some(&v[2]))?)?;
    let h = silu(&linear(&h, &v[3], Some(&v[4]))?)?;
    linear(&h, &v[5], Some(&v[6]))
}

fn conv3x3<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    conv2d(&v[0], &v[1], Some(&v[2]), 1, 1)
}

fn conv_stride2<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    conv2d(&v[0], &v[1], Some(&v[2]), 2, 1)
}

fn conv1x1_square<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    conv2d(&v[0], &v[1], None, 1, 0)?.square()
}

fn group_norm_affine<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    group_norm(&v[0], 2, &v[1], &v[2])
}

fn norm_act_conv<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let h = silu(&group_norm(&v[0], 1, &v[1], &v[2])?)?;
    conv2d(&h, &v[3], Some(&v[4]), 1, 1)
}

fn pool_upsample<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    nearest_upsample2(&avg_pool2(&v[0])?)?.mul(&v[0])
}

fn channel_bias<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    add_channel_bias(&v[0], &v[1])?.square()
}

fn raw_attention<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    spatial_attention(&v[0], &v[1], &v[2])
}

fn projected_attention<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let w = AttentionWeights {
        wq: &v[1],
        bq: &v[2],
        wk: &v[3],
        bk: &v[4],
        wv: &v[5],
        bv: &v[6],
        wo: &v[7],
        bo: &v[8],
    };
    attention2d(&v[0], &w)?.add(&v[0])
}

fn residual_block<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let (x, temb) = (&v[0], &v[1]);
    let h = conv2d(&silu(&group_norm(x, 2, &v[2], &v[3])?)?, &v[4], Some(&v[5]), 1, 1)?;
    let h = add_channel_bias(&h, &linear(&silu(temb)?, &v[6], Some(&v[7]))?)?;
    let h = conv2d(&silu(&group_norm(&h, 2, &v[8], &v[9])?)?, &v[10], Some(&v[11]), 1, 1)?;
    h.add(x)
}

fn modulation_rule<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let m = ModulationParams { gamma: v[1].clone(), nu: v[2].clone() };
    modulate(&v[0], &m)?.square()
}

fn threshold_product<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    static_threshold(&v[0].mul_scalar(c(1.6))?)?.mul(&v[1])
}

pub fn schedule() -> VarianceSchedule {
    VarianceSchedule::linear(10, 0.05, 0.3).unwrap()
}

fn noise_round_trip<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let s = schedule();
    let ts = [3, 9];
    let xt = forward_noise_batch(&v[0], &ts, &v[1], &s)?;
    predict_x0_batch(&xt, &v[1].mul(&v[1])?, &ts, &s)
}

fn down_up_skip<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let d = silu(&group_norm(&conv2d(&v[0], &v[1], Some(&v[2]), 2, 1)?, 1, &v[3], &v[4])?)?;
    let u = nearest_upsample2(&d)?;
    conv2d(&Var::concat1(&[&u, &v[0]])?, &v[5], None, 1, 1)
}

fn time_conditioned<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let emb = Var::constant(sinusoidal_time_embedding::<T>(&[4.0, 17.0], 6)?);
    let h = linear(&silu(&linear(&emb, &v[1], Some(&v[2]))?)?, &v[3], Some(&v[4]))?;
    silu(&add_channel_bias(&v[0], &h)?)
}

fn modulation_loss_fixed_l1<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let s = schedule();
    let ts = [2, 7];
    let x0 = Tensor::from_f64(&[2, 1, 2, 2], &[0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.0, 0.2]).unwrap();
    let eps = Var::constant(Tensor::from_f64(&[2, 1, 2, 2], &[0.9, -1.1, 0.4, 0.2, -0.3, 0.7, 1.2, -0.5]).unwrap());
    let xt = forward_noise_batch(&Var::constant(x0.clone()), &ts, &eps, &s)?;
    let m = ModulationParams { gamma: v[0].clone(), nu: v[1].clone() };
    Ok(mcm_loss(&x0, &xt, &eps, &m, &ts, &s, 1.0, L1Weight::Fixed(0.05), false)?.total)
}

fn modulation_loss_auto_l1<T: Scalar>(v: &[Var<T>]) -> Result<Var<T>> {
    let s = schedule();
    let ts = [5, 1];
    let x0 = Tensor::from_f64(&[2, 1, 2, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, -0.1]).unwrap();
    let eps = Var::constant(Tensor::from_f64(&[2, 1, 2, 2], &[-0.2, 0.3, 0.8, -0.9, 0.1, 0.6, -0.7, 0.4]).unwrap());
    let xt = forward_noise_batch(&Var::constant(x0.clone()), &ts, &eps, &s)?;
    let m = ModulationParams { gamma: v[0].mul_scalar(c(0.3))?, nu: v[1].mul_scalar(c(0.3))? };
    Ok(mcm_loss(&x0, &xt, &eps, &m, &ts, &s, 2.0, L1Weight::Auto, false)?.total)
}

pub fn cases() -> Vec<Case> {
    vec![
        case!("add_mul_broadcast", [[2, 3], [2, 1]], add_mul_broadcast),
        case!("sub_div", [[5], [5]], sub_div),
        case!("scalar_chain", [[2, 3]], scalar_chain),
        case!("abs_mean", [[3, 2], [3, 2]], abs_mean),
        case!("clamp_band", [[12]], clamp_band),
        case!("concat_reshape", [[2, 3], [2, 2]], concat_reshape),
        case!("three_layer_mlp", [[3, 4], [5, 4], [5], [5, 5], [5], [2, 5], [2]], three_layer_mlp),
        case!("conv3x3", [[2, 2, 5, 5], [3, 2, 3, 3], [3]], conv3x3),
        case!("conv_stride2", [[1, 2, 6, 6], [2, 2, 3, 3], [2]], conv_stride2),
        case!("conv1x1_square", [[2, 3, 2, 3], [2, 3, 1, 1]], conv1x1_square),
        case!("group_norm_affine", [[2, 4, 3, 3], [4], [4]], group_norm_affine),
        case!("norm_act_conv", [[1, 3, 4, 4], [3], [3], [2, 3, 3, 3], [2]], norm_act_conv),
        case!("pool_upsample", [[2, 2, 4, 4]], pool_upsample),
        case!("channel_bias", [[2, 3, 2, 2], [2, 3]], channel_bias),
        case!("raw_attention", [[1, 2, 3, 3], [1, 2, 3, 3], [1, 2, 3, 3]], raw_attention),
        case!(
            "projected_attention",
            [[1, 4, 2, 2], [4, 4, 1, 1], [4], [4, 4, 1, 1], [4], [4, 4, 1, 1], [4], [4, 4, 1, 1], [4]],
            projected_attention
        ),
        case!(
            "residual_block",
            [[2, 4, 3, 3], [2, 6], [4], [4], [4, 4, 3, 3], [4], [4, 6], [4], [4], [4], [4, 4, 3, 3], [4]],
            residual_block
        ),
        case!("modulation_rule", [[2, 3, 2, 2], [2, 3, 2, 2], [2, 3, 2, 2]], modulation_rule),
        case!("threshold_product", [[10], [10]], threshold_product),
        case!("noise_round_trip", [[2, 3], [2, 3]], noise_round_trip),
        case!("down_up_skip", [[1, 2, 4, 4], [3, 2, 3, 3], [3], [3], [3], [2, 5, 3, 3]], down_up_skip),
        case!("time_conditioned", [[2, 3, 2, 2], [4, 6], [4], [3, 4], [3]], time_conditioned),
        case!("modulation_loss_fixed_l1", [[2, 1, 2, 2], [2, 1, 2, 2]], modulation_loss_fixed_l1),
        case!("modulation_loss_auto_l1", [[2, 1, 2, 2], [2, 1, 2, 2]], modulation_loss_auto_l1),
    ]
}

/// Values with magnitude in [0.15, 1], away from the clamp kink at |1.6 x| = 1.
pub fn draw(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let m: f64 = rng.random_range(0.15..1.0);
            if (m * 1.6 - 1.0).abs() > 0.02 {
                break if rng.random_bool(0.5) { m } else { -m };
            }
        })
        .collect::<Vec<_>>();
    Tensor::new(shape, data).unwrap()
}

pub fn weighted<T: Scalar>(f: Comp<T>, inputs: &[Var<T>], w: &Tensor<T>) -> Var<T> {
    let out = f(inputs).unwrap();
    out.mul(&Var::constant(w.clone())).unwrap().sum().unwrap()
}

pub fn analytic<T: Scalar>(f: Comp<T>, inputs: &[Tensor<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let leaves: Vec<Var<T>> = inputs.iter().map(|t| Var::leaf(t.cast())).collect();
    let loss = weighted(f, &leaves, &w.cast());
    backward(&loss, &mut ParamStore::new()).unwrap();
    leaves.iter().map(|l| l.grad().as_ref().expect("gradient on every input").to_f64_vec()).collect()
}

pub fn value(f: Comp<f64>, inputs: &[Tensor<f64>], w: &Tensor<f64>) -> f64 {
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
    weighted(f, &vars, w).value().item().unwrap()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(GRAD_FLOOR)
}

/// Worst relative error of the f32 and f64 gradients over all inputs.
pub fn check(case: &Case, seed: u64) -> (f64, f64) {
    let mut rng = seeded(seed);
    let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| draw(s, &mut rng)).collect();
    let probe: Vec<Var<f64>> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
    let out_shape = (case.f64)(&probe).unwrap().shape().to_vec();
    let w = draw(&out_shape, &mut rng);
    let g64 = analytic(case.f64, &inputs, &w);
    let g32 = analytic(case.f32, &inputs, &w);
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let coords: Vec<usize> =
            if n <= MAX_PROBES { (0..n).collect() } else { (0..MAX_PROBES).map(|_| rng.random_range(0..n)).collect() };
        let mut fd = Vec::new();
        for &j in &coords {
            let mut shifted = inputs.clone();
            shifted[i].data_mut()[j] += H;
            let up = value(case.f64, &shifted, &w);
            shifted[i].data_mut()[j] -= 2.0 * H;
            let down = value(case.f64, &shifted, &w);
            fd.push((up - down) / (2.0 * H));
        }
        let pick = |g: &[f64]| coords.iter().map(|&j| g[j]).collect::<Vec<_>>();
        e64 = e64.max(relative_error(&pick(&g64[i]), &fd));
        e32 = e32.max(relative_error(&pick(&g32[i]), &fd));
    }
    (e32, e64)
}

/// `(name, f32 error, f64 error)` for every composition, one seed each.
pub fn run_all() -> Vec<(&'static str, f64, f64)> {
    cases()
        .iter()
        .enumerate()
        .map(|(k, case)| {
            let (e32, e64) = check(case, 1000 + k as u64);
            (case.name, e32, e64)
        })
        .collect()
}
