//! Alignment and sample-quality measurements.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::synth::sketch_from_image;
use crate::tensor::Tensor;

/// Per-pixel nearest palette color of a `[3, H, W]` image.
pub fn derive_seg_from_image<T: Scalar>(img: &Tensor<T>, palette: &[[f64; 3]]) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::InvalidArgument(format!("expected a [3, H, W] image, got {:?}", img.shape())));
    }
    if palette.is_empty() || palette.len() > 256 {
        return Err(Error::InvalidArgument(format!("palette of {} colors", palette.len())));
    }
    let plane = img.shape()[1] * img.shape()[2];
    let d = img.data();
    Ok((0..plane)
        .map(|i| {
            let px = [d[i].as_f64(), d[plane + i].as_f64(), d[2 * plane + i].as_f64()];
            let mut best = (f64::INFINITY, 0u8);
            for (k, c) in palette.iter().enumerate() {
                let dist: f64 = (0..3).map(|j| (px[j] - c[j]).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, k as u8);
                }
            }
            best.1
        })
        .collect())
}

/// Intersection and union counts per class.
pub fn class_counts(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Vec<(usize, usize)>> {
    if pred.len() != gt.len() {
        return shape_err("miou", &[pred.len()], &[gt.len()]);
    }
    let mut counts = vec![(0usize, 0usize); num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::InvalidArgument(format!("class id {} >= {num_classes}", p.max(g))));
        }
        if p == g {
            counts[p].0 += 1;
            counts[p].1 += 1;
        } else {
            counts[p].1 += 1;
            counts[g].1 += 1;
        }
    }
    Ok(counts)
}

/// Mean IoU over the classes present in either map.
pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<f64> {
    let counts = class_counts(pred, gt, num_classes)?;
    let ious: Vec<f64> = counts.iter().filter(|c| c.1 > 0).map(|&(i, u)| i as f64 / u as f64).collect();
    if ious.is_empty() {
        return Err(Error::InvalidArgument("empty segmentation maps".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn pixel_accuracy(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return shape_err("pixel_accuracy", &[pred.len()], &[gt.len()]);
    }
    Ok(pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Squared distance transform of a 1-D sampled function.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            }
            Some(_) => loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                    continue;
                }
                if s <= z[k] {
                    // k == 0 and the new parabola dominates everywhere.
                    v[0] = q;
                    z[1] = f64::INFINITY;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                }
                break;
            },
        }
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel
/// (infinite when the mask is empty).
pub fn distance_transform(mask: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut g: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0f64; height];
    let mut col_out = vec![0f64; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = g[y * width + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..height {
            g[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0f64; width];
    for y in 0..height {
        edt_1d(&g[y * width..(y + 1) * width], &mut row_out);
        g[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    g.iter().map(|v| v.sqrt()).collect()
}

/// Symmetric mean nearest-edge distance between two binary edge maps, in
/// pixels. An empty map against a non-empty one scores the image diagonal.
pub fn edge_map_distance(a: &[bool], b: &[bool], height: usize, width: usize) -> Result<f64> {
    if a.len() != height * width || b.len() != height * width {
        return shape_err("sketch_distance", &[a.len(), b.len()], &[height * width]);
    }
    let (na, nb) = (a.iter().filter(|&&v| v).count(), b.iter().filter(|&&v| v).count());
    if na == 0 && nb == 0 {
        return Ok(0.0);
    }
    let diagonal = ((height * height + width * width) as f64).sqrt();
    if na == 0 || nb == 0 {
        return Ok(diagonal);
    }
    let directed = |src: &[bool], n: usize, dt: &[f64]| {
        src.iter().zip(dt).filter(|(s, _)| **s).map(|(_, d)| *d).sum::<f64>() / n as f64
    };
    let dt_a = distance_transform(a, height, width);
    let dt_b = distance_transform(b, height, width);
    Ok(0.5 * (directed(a, na, &dt_b) + directed(b, nb, &dt_a)))
}

pub fn binarize(v: &[f32]) -> Vec<bool> {
    v.iter().map(|&x| x >= 0.5).collect()
}

/// Distance between the sketch extracted from a generated `[3, H, W]` image
/// and a reference sketch.
pub fn sketch_distance<T: Scalar>(gen_img: &Tensor<T>, gt_sketch: &[f32]) -> Result<f64> {
    if gen_img.rank() != 3 || gen_img.shape()[0] != 3 {
        return Err(Error::InvalidArgument(format!("expected a [3, H, W] image, got {:?}", gen_img.shape())));
    }
    let (h, w) = (gen_img.shape()[1], gen_img.shape()[2]);
    let extracted = sketch_from_image(&gen_img.cast::<f32>());
    edge_map_distance(&binarize(&extracted), &binarize(gt_sketch), h, w)
}

/// Mean over all pairs of the mean squared pixel difference.
pub fn diversity_proxy<T: Scalar>(samples: &[Tensor<T>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if samples[i].shape() != samples[j].shape() {
                return shape_err("diversity_proxy", samples[i].shape(), samples[j].shape());
            }
            let mse = samples[i]
                .data()
                .iter()
                .zip(samples[j].data())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum::<f64>()
                / samples[i].numel() as f64;
            total += mse;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Area-average each `[C, H, W]` row of a `[N, C, H, W]` batch to
/// `[C, side, side]` and flatten.
pub fn downsample_flatten<T: Scalar>(images: &Tensor<T>, side: usize) -> Result<Vec<Vec<f64>>> {
    let [n, c, h, w] = *images.shape() else {
        return Err(Error::InvalidArgument(format!("expected [N, C, H, W], got {:?}", images.shape())));
    };
    if h < side || w < side {
        return Err(Error::InvalidArgument(format!("cannot downsample {h}x{w} to {side}x{side}")));
    }
    let d = images.data();
    Ok((0..n)
        .map(|i| {
            let mut acc = vec![0f64; c * side * side];
            let mut cnt = vec![0usize; side * side];
            for y in 0..h {
                for x in 0..w {
                    let cell = (y * side / h) * side + x * side / w;
                    cnt[cell] += 1;
                    for ch in 0..c {
                        acc[ch * side * side + cell] += d[((i * c + ch) * h + y) * w + x].as_f64();
                    }
                }
            }
            for ch in 0..c {
                for cell in 0..side * side {
                    acc[ch * side * side + cell] /= cnt[cell] as f64;
                }
            }
            acc
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median pairwise Euclidean distance over the pooled sets.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d: Vec<f64> = Vec::with_capacity(all.len() * (all.len() - 1) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq_dist(all[i], all[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Unbiased MMD^2 with kernel `exp(-|a - b|^2 / (2 bw^2))`.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: Option<f64>) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument(format!("MMD needs at least 2 points per set, got {} and {}", x.len(), y.len())));
    }
    let bw = bandwidth.unwrap_or_else(|| median_bandwidth(x, y));
    if !(bw > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bw}")));
    }
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * bw * bw)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    cross /= (x.len() * y.len()) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

pub const MMD_SIDE: usize = 8;

/// MMD^2 between generated and real `[N, C, H, W]` batches on 8x8 thumbnails.
pub fn mmd_quality<T: Scalar>(generated: &Tensor<T>, real: &Tensor<T>, bandwidth: Option<f64>) -> Result<f64> {
    mmd2_unbiased(&downsample_flatten(generated, MMD_SIDE)?, &downsample_flatten(real, MMD_SIDE)?, bandwidth)
}

/// Segmentation and sketch alignment over a set of generated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Mean over images of the per-image mIoU.
    pub miou: f64,
    pub accuracy: f64,
    /// Mean over images, in pixels.
    pub sketch_distance: f64,
    /// Dataset-level IoU per class; `None` for classes never seen.
    pub per_class_iou: Vec<Option<f64>>,
    pub n: usize,
}

/// Score images `[3, H, W]` against their reference segmentation and sketch.
pub fn alignment_report<T: Scalar>(
    images: &[Tensor<T>],
    gt_seg: &[&[u8]],
    gt_sketch: &[&[f32]],
    palette: &[[f64; 3]],
) -> Result<AlignmentReport> {
    if images.is_empty() || images.len() != gt_seg.len() || images.len() != gt_sketch.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images, {} seg maps, {} sketches",
            images.len(),
            gt_seg.len(),
            gt_sketch.len()
        )));
    }
    let k = palette.len();
    let mut totals = vec![(0usize, 0usize); k];
    let (mut m, mut a, mut s) = (0.0, 0.0, 0.0);
    for ((img, seg), sk) in images.iter().zip(gt_seg).zip(gt_sketch) {
        let pred = derive_seg_from_image(img, palette)?;
        for (t, c) in totals.iter_mut().zip(class_counts(&pred, seg, k)?) {
            t.0 += c.0;
            t.1 += c.1;
        }
        m += miou(&pred, seg, k)?;
        a += pixel_accuracy(&pred, seg)?;
        s += sketch_distance(img, sk)?;
    }
    let n = images.len() as f64;
    Ok(AlignmentReport {
        miou: m / n,
        accuracy: a / n,
        sketch_distance: s / n,
        per_class_iou: totals.iter().map(|&(i, u)| (u > 0).then(|| i as f64 / u as f64)).collect(),
        n: images.len(),
    })
}

/// Flat evaluation summary as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: Option<f64>,
    pub accuracy: Option<f64>,
    pub sketch_distance: Option<f64>,
    pub diversity: Option<f64>,
    pub mmd: Option<f64>,
    pub n: usize,
}
