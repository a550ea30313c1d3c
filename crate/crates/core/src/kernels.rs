//! Neural network layer kernels with hand-written backward passes.

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

fn dims4(x: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::InvalidArgument(format!("{op} expects NCHW input, got {:?}", x.shape()))),
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Target number of output columns per im2col chunk.
const CHUNK_COLS: usize = 2048;

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn samples_per_chunk(&self) -> usize {
        (CHUNK_COLS / self.plane()).max(1)
    }
}

/// Unfold `nb` consecutive samples of `x` into a `[cin*k*k, nb*ho*wo]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, nb: usize, out: &mut Vec<T>) {
    let plane = g.plane();
    let cols = nb * plane;
    out.clear();
    out.resize(g.rows() * cols, T::zero());
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut out[r * cols..(r + 1) * cols];
                for b in 0..nb {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..(b * g.cin + ci + 1) * g.h * g.w];
                    let dst = &mut row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            // ix = ox + kx - pad
                            let lo = g.pad.saturating_sub(kx);
                            let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
                            if lo < hi {
                                let s0 = lo + kx - g.pad;
                                dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold a `[cin*k*k, nb*ho*wo]` column matrix back into `nb` images, summing
/// overlaps into `out`.
fn col2im<T: Scalar>(cols_m: &[T], g: &ConvGeom, nb: usize, out: &mut [T]) {
    let plane = g.plane();
    let cols = nb * plane;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols_m[r * cols..(r + 1) * cols];
                for b in 0..nb {
                    let dst = &mut out[(b * g.cin + ci) * g.h * g.w..(b * g.cin + ci + 1) * g.h * g.w];
                    let src = &row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let lo = g.pad.saturating_sub(kx);
                            let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
                            if lo < hi {
                                let s0 = lo + kx - g.pad;
                                for (d, &v) in dst_row[s0..s0 + (hi - lo)].iter_mut().zip(&src_row[lo..hi]) {
                                    *d = *d + v;
                                }
                            }
                        } else {
                            for (ox, &v) in src_row.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst_row[ix as usize] = dst_row[ix as usize] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gather `nb` samples of `[cout, plane]` blocks into one `[cout, nb*plane]` matrix.
fn gather_channels<T: Scalar>(src: &[T], cout: usize, plane: usize, nb: usize, out: &mut Vec<T>) {
    out.clear();
    out.resize(cout * nb * plane, T::zero());
    for b in 0..nb {
        for c in 0..cout {
            out[(c * nb + b) * plane..(c * nb + b + 1) * plane]
                .copy_from_slice(&src[(b * cout + c) * plane..(b * cout + c + 1) * plane]);
        }
    }
}

/// 2-D cross-correlation. `weight` is `[cout, cin, k, k]`, `bias` is `[cout]`.
pub fn conv2d<T: Scalar>(
    input: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let x = input.value().clone();
    let wt = weight.value().clone();
    let (batch, cin, h, w) = dims4(&x, "conv2d")?;
    let (cout, wcin, k) = match *wt.shape() {
        [co, ci, kh, kw] if kh == kw => (co, ci, kh),
        _ => return Err(Error::InvalidArgument(format!("conv2d weight shape {:?}", wt.shape()))),
    };
    if wcin != cin {
        return shape_err("conv2d channels", x.shape(), wt.shape());
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride 0".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::InvalidArgument(format!("conv2d kernel {k} larger than padded input {h}x{w}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return shape_err("conv2d bias", b.shape(), &[cout]);
        }
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let g = ConvGeom { cin, h, w, k, stride, pad: padding, ho, wo };
    let plane = g.plane();
    let in_sz = cin * h * w;
    let out_sz = cout * plane;
    let wmat = MatRef::new(wt.data(), cout, g.rows());

    let mut out = vec![T::zero(); batch * out_sz];
    if g.is_pointwise() {
        for b in 0..batch {
            let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
            gemm(T::one(), wmat, MatRef::new(xb, cin, plane), T::zero(), &mut out[b * out_sz..(b + 1) * out_sz]);
        }
    } else {
        let spc = g.samples_per_chunk();
        let mut cols = Vec::new();
        let mut tmp = Vec::new();
        for start in (0..batch).step_by(spc) {
            let nb = spc.min(batch - start);
            im2col(&x.data()[start * in_sz..(start + nb) * in_sz], &g, nb, &mut cols);
            if nb == 1 {
                gemm(T::one(), wmat, MatRef::new(&cols, g.rows(), plane), T::zero(), &mut out[start * out_sz..(start + 1) * out_sz]);
            } else {
                tmp.clear();
                tmp.resize(cout * nb * plane, T::zero());
                gemm(T::one(), wmat, MatRef::new(&cols, g.rows(), nb * plane), T::zero(), &mut tmp);
                for bi in 0..nb {
                    for co in 0..cout {
                        out[((start + bi) * cout + co) * plane..((start + bi) * cout + co + 1) * plane]
                            .copy_from_slice(&tmp[(co * nb + bi) * plane..(co * nb + bi + 1) * plane]);
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        let bd = b.value().data();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = bd[i % cout];
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
    let value = Tensor::from_parts(vec![batch, cout, ho, wo], out);

    let need_dx = input.requires_grad();
    let need_dw = weight.requires_grad();
    let has_bias = bias.is_some();
    let mut parents = vec![input, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    Var::from_op("conv2d", value, &parents, move |grad| {
        let gd = grad.data();
        let wmat = MatRef::new(wt.data(), cout, g.rows());
        let mut dx = if need_dx { vec![T::zero(); batch * in_sz] } else { Vec::new() };
        let mut dw = if need_dw { vec![T::zero(); cout * g.rows()] } else { Vec::new() };
        let spc = if g.is_pointwise() { 1 } else { g.samples_per_chunk() };
        let mut cols = Vec::new();
        let mut gbuf = Vec::new();
        let mut dcols = Vec::new();
        for start in (0..batch).step_by(spc) {
            let nb = spc.min(batch - start);
            let gslice = &gd[start * out_sz..(start + nb) * out_sz];
            let gmat: &[T] = if nb == 1 {
                gslice
            } else {
                gather_channels(gslice, cout, plane, nb, &mut gbuf);
                &gbuf
            };
            let gm = MatRef::new(gmat, cout, nb * plane);
            if need_dw {
                let xs = &x.data()[start * in_sz..(start + nb) * in_sz];
                let cm: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &g, nb, &mut cols);
                    &cols
                };
                gemm(T::one(), gm, MatRef::new(cm, g.rows(), nb * plane).t(), T::one(), &mut dw);
            }
            if need_dx {
                let dxs = &mut dx[start * in_sz..(start + nb) * in_sz];
                if g.is_pointwise() {
                    gemm(T::one(), wmat.t(), gm, T::zero(), dxs);
                } else {
                    dcols.clear();
                    dcols.resize(g.rows() * nb * plane, T::zero());
                    gemm(T::one(), wmat.t(), gm, T::zero(), &mut dcols);
                    col2im(&dcols, &g, nb, dxs);
                }
            }
        }
        let mut res = vec![
            need_dx.then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
            need_dw.then(|| Tensor::from_parts(wt.shape().to_vec(), dw)),
        ];
        if has_bias {
            let mut db = vec![T::zero(); cout];
            for (i, ch) in gd.chunks(plane).enumerate() {
                db[i % cout] = db[i % cout] + fast_sum(ch);
            }
            res.push(Some(Tensor::from_parts(vec![cout], db)));
        }
        Ok(res)
    })
}

/// Sum with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn fast_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = acc[i] + c[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &r in rem {
        s = s + r;
    }
    s
}

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn fast_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// `x W^T + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear<T: Scalar>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
    let xv = x.value().clone();
    let wv = weight.value().clone();
    let (batch, fin) = match *xv.shape() {
        [b, f] => (b, f),
        _ => return Err(Error::InvalidArgument(format!("linear expects [B, in], got {:?}", xv.shape()))),
    };
    let fout = match *wv.shape() {
        [o, i] if i == fin => o,
        _ => return shape_err("linear", xv.shape(), wv.shape()),
    };
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return shape_err("linear bias", b.shape(), &[fout]);
        }
    }
    let mut out = vec![T::zero(); batch * fout];
    gemm(T::one(), MatRef::new(xv.data(), batch, fin), MatRef::new(wv.data(), fout, fin).t(), T::zero(), &mut out);
    if let Some(b) = bias {
        let bd = b.value().data();
        for row in out.chunks_mut(fout) {
            for (v, &bv) in row.iter_mut().zip(bd) {
                *v = *v + bv;
            }
        }
    }
    let value = Tensor::from_parts(vec![batch, fout], out);
    let has_bias = bias.is_some();
    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    Var::from_op("linear", value, &parents, move |g| {
        let gd = g.data();
        let mut dx = vec![T::zero(); batch * fin];
        gemm(T::one(), MatRef::new(gd, batch, fout), MatRef::new(wv.data(), fout, fin), T::zero(), &mut dx);
        let mut dw = vec![T::zero(); fout * fin];
        gemm(T::one(), MatRef::new(gd, batch, fout).t(), MatRef::new(xv.data(), batch, fin), T::zero(), &mut dw);
        let mut res = vec![
            Some(Tensor::from_parts(vec![batch, fin], dx)),
            Some(Tensor::from_parts(vec![fout, fin], dw)),
        ];
        if has_bias {
            let mut db = vec![T::zero(); fout];
            for row in gd.chunks(fout) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            res.push(Some(Tensor::from_parts(vec![fout], db)));
        }
        Ok(res)
    })
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization over `[B, C, H, W]` with per-channel affine.
pub fn group_norm<T: Scalar>(x: &Var<T>, groups: usize, gain: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let xv = x.value().clone();
    let (batch, c, h, w) = dims4(&xv, "group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!("group_norm: {groups} groups do not divide {c} channels")));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return shape_err("group_norm affine", gain.shape(), &[c]);
    }
    let cpg = c / groups;
    let plane = h * w;
    let gsize = cpg * plane;
    let eps = T::of(GROUP_NORM_EPS);
    let n = T::of(gsize as f64);
    let xd = xv.data();
    let gd = gain.value().data().to_vec();
    let bd = bias.value().data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut rstd = vec![T::zero(); batch * groups];
    for (bg, chunk) in xd.chunks(gsize).enumerate() {
        let mean = fast_sum(chunk) / n;
        let dst = &mut xhat[bg * gsize..(bg + 1) * gsize];
        for (o, &v) in dst.iter_mut().zip(chunk) {
            *o = v - mean;
        }
        let var = fast_dot(dst, dst) / n;
        let r = T::one() / (var + eps).sqrt();
        rstd[bg] = r;
        for o in dst.iter_mut() {
            *o = *o * r;
        }
    }
    let mut out = vec![T::zero(); xd.len()];
    for (i, (o, xh)) in out.chunks_mut(plane).zip(xhat.chunks(plane)).enumerate() {
        let ch = i % c;
        let (gv, bv) = (gd[ch], bd[ch]);
        for (o, &v) in o.iter_mut().zip(xh) {
            *o = v * gv + bv;
        }
    }
    let value = Tensor::from_parts(xv.shape().to_vec(), out);
    Var::from_op("group_norm", value, &[x, gain, bias], move |g| {
        let gdat = g.data();
        let mut dgain = vec![T::zero(); c];
        let mut dbias = vec![T::zero(); c];
        let mut sums = vec![T::zero(); batch * c];
        let mut dots = vec![T::zero(); batch * c];
        for (i, (gc, xc)) in gdat.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
            let ch = i % c;
            sums[i] = fast_sum(gc);
            dots[i] = fast_dot(gc, xc);
            dbias[ch] = dbias[ch] + sums[i];
            dgain[ch] = dgain[ch] + dots[i];
        }
        let mut dx = vec![T::zero(); gdat.len()];
        for bg in 0..batch * groups {
            let (b, grp) = (bg / groups, bg % groups);
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for ch in grp * cpg..(grp + 1) * cpg {
                mean_d = mean_d + gd[ch] * sums[b * c + ch];
                mean_dx = mean_dx + gd[ch] * dots[b * c + ch];
            }
            mean_d = mean_d / n;
            mean_dx = mean_dx / n;
            let r = rstd[bg];
            for ch in grp * cpg..(grp + 1) * cpg {
                let off = (b * c + ch) * plane;
                let gv = gd[ch];
                for ((d, &gi), &xh) in dx[off..off + plane].iter_mut().zip(&gdat[off..off + plane]).zip(&xhat[off..off + plane]) {
                    *d = r * (gi * gv - mean_d - xh * mean_dx);
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_parts(vec![batch, c, h, w], dx)),
            Some(Tensor::from_parts(vec![c], dgain)),
            Some(Tensor::from_parts(vec![c], dbias)),
        ])
    })
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `x * sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let xv = x.value().clone();
    let value = xv.map(|v| v * sigmoid(v));
    Var::from_op("silu", value, &[x], move |g| {
        Ok(vec![Some(g.zip_map(&xv, "silu", |g, v| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })?)])
    })
}

/// Add a per-sample, per-channel vector `[B, C]` to every pixel of `[B, C, H, W]`.
pub fn add_channel_bias<T: Scalar>(x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
    let (batch, c, h, w) = dims4(x.value(), "add_channel_bias")?;
    if v.shape() != [batch, c] {
        return shape_err("add_channel_bias", x.shape(), v.shape());
    }
    let plane = h * w;
    let vd = v.value().data();
    let mut out = x.value().data().to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = vd[i];
        for o in chunk {
            *o = *o + b;
        }
    }
    let value = Tensor::from_parts(vec![batch, c, h, w], out);
    Var::from_op("add_channel_bias", value, &[x, v], move |g| {
        let dv: Vec<T> = g.data().chunks(plane).map(|ch| ch.iter().copied().sum()).collect();
        Ok(vec![Some(g.clone()), Some(Tensor::from_parts(vec![batch, c], dv))])
    })
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let (batch, c, h, w) = dims4(x.value(), "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!("avg_pool2 needs even extents, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.value().data();
    let q = T::of(0.25);
    let mut out = vec![T::zero(); batch * c * ho * wo];
    for p in 0..batch * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * wo + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
            }
        }
    }
    let value = Tensor::from_parts(vec![batch, c, ho, wo], out);
    Var::from_op("avg_pool2", value, &[x], move |g| {
        let gd = g.data();
        let mut dx = vec![T::zero(); batch * c * h * w];
        for p in 0..batch * c {
            let src = &gd[p * ho * wo..(p + 1) * ho * wo];
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = src[oy * wo + ox] * q;
                    let i = 2 * oy * w + 2 * ox;
                    dst[i] = v;
                    dst[i + 1] = v;
                    dst[i + w] = v;
                    dst[i + w + 1] = v;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![batch, c, h, w], dx))])
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn nearest_upsample2<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let (batch, c, h, w) = dims4(x.value(), "nearest_upsample2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.value().data();
    let mut out = vec![T::zero(); batch * c * ho * wo];
    for p in 0..batch * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    let value = Tensor::from_parts(vec![batch, c, ho, wo], out);
    Var::from_op("nearest_upsample2", value, &[x], move |g| {
        let gd = g.data();
        let mut dx = vec![T::zero(); batch * c * h * w];
        for p in 0..batch * c {
            let src = &gd[p * ho * wo..(p + 1) * ho * wo];
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = (oy / 2) * w + ox / 2;
                    dst[i] = dst[i] + src[oy * wo + ox];
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![batch, c, h, w], dx))])
    })
}

/// Single-head softmax attention over spatial positions.
///
/// `q`, `k`, `v` are `[B, C, H, W]`; each position attends to all positions
/// with scores `q_i . k_j / sqrt(C)`.
pub fn spatial_attention<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
    let (batch, c, h, w) = dims4(q.value(), "spatial_attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return shape_err("spatial_attention", q.shape(), k.shape());
    }
    let n = h * w;
    let scale = T::one() / T::of(c as f64).sqrt();
    let (qd, kd, vd) = (q.value().clone(), k.value().clone(), v.value().clone());
    let mut probs = vec![T::zero(); batch * n * n];
    let mut out = vec![T::zero(); batch * c * n];
    for b in 0..batch {
        let qb = &qd.data()[b * c * n..(b + 1) * c * n];
        let kb = &kd.data()[b * c * n..(b + 1) * c * n];
        let vb = &vd.data()[b * c * n..(b + 1) * c * n];
        let pb = &mut probs[b * n * n..(b + 1) * n * n];
        // scores[i, j] = sum_c q[c, i] k[c, j]
        gemm(scale, MatRef::new(qb, c, n).t(), MatRef::new(kb, c, n), T::zero(), pb);
        for row in pb.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                s = s + *r;
            }
            for r in row.iter_mut() {
                *r = *r / s;
            }
        }
        // out[c, i] = sum_j v[c, j] p[i, j]
        gemm(
            T::one(),
            MatRef::new(vb, c, n),
            MatRef::new(pb, n, n).t(),
            T::zero(),
            &mut out[b * c * n..(b + 1) * c * n],
        );
    }
    let value = Tensor::from_parts(vec![batch, c, h, w], out);
    Var::from_op("spatial_attention", value, &[q, k, v], move |g| {
        let gd = g.data();
        let mut dq = vec![T::zero(); batch * c * n];
        let mut dk = vec![T::zero(); batch * c * n];
        let mut dv = vec![T::zero(); batch * c * n];
        let mut dp = vec![T::zero(); n * n];
        for b in 0..batch {
            let r = b * c * n..(b + 1) * c * n;
            let (qb, kb, vb, gb) = (&qd.data()[r.clone()], &kd.data()[r.clone()], &vd.data()[r.clone()], &gd[r.clone()]);
            let pb = &probs[b * n * n..(b + 1) * n * n];
            // dv[c, j] = sum_i g[c, i] p[i, j]
            gemm(T::one(), MatRef::new(gb, c, n), MatRef::new(pb, n, n), T::zero(), &mut dv[r.clone()]);
            // dp[i, j] = sum_c g[c, i] v[c, j]
            gemm(T::one(), MatRef::new(gb, c, n).t(), MatRef::new(vb, c, n), T::zero(), &mut dp);
            // ds = p * (dp - rowsum(dp * p)), stored in dp
            for (dprow, prow) in dp.chunks_mut(n).zip(pb.chunks(n)) {
                let dot: T = dprow.iter().zip(prow).map(|(&a, &p)| a * p).sum();
                for (d, &p) in dprow.iter_mut().zip(prow) {
                    *d = p * (*d - dot);
                }
            }
            // dq[c, i] = scale * sum_j ds[i, j] k[c, j]
            gemm(scale, MatRef::new(kb, c, n), MatRef::new(&dp, n, n).t(), T::zero(), &mut dq[r.clone()]);
            // dk[c, j] = scale * sum_i ds[i, j] q[c, i]
            gemm(scale, MatRef::new(qb, c, n), MatRef::new(&dp, n, n), T::zero(), &mut dk[r.clone()]);
        }
        let shape = vec![batch, c, h, w];
        Ok(vec![
            Some(Tensor::from_parts(shape.clone(), dq)),
            Some(Tensor::from_parts(shape.clone(), dk)),
            Some(Tensor::from_parts(shape, dv)),
        ])
    })
}

/// Weights of a self-attention block: 1x1 query/key/value/output projections.
pub struct AttentionWeights<'a, T: Scalar> {
    pub wq: &'a Var<T>,
    pub bq: &'a Var<T>,
    pub wk: &'a Var<T>,
    pub bk: &'a Var<T>,
    pub wv: &'a Var<T>,
    pub bv: &'a Var<T>,
    pub wo: &'a Var<T>,
    pub bo: &'a Var<T>,
}

/// Projected self-attention `Wo * attn(Wq x, Wk x, Wv x)` (no residual).
pub fn attention2d<T: Scalar>(x: &Var<T>, w: &AttentionWeights<'_, T>) -> Result<Var<T>> {
    let q = conv2d(x, w.wq, Some(w.bq), 1, 0)?;
    let k = conv2d(x, w.wk, Some(w.bk), 1, 0)?;
    let v = conv2d(x, w.wv, Some(w.bv), 1, 0)?;
    let a = spatial_attention(&q, &k, &v)?;
    conv2d(&a, w.wo, Some(w.bo), 1, 0)
}

/// Sinusoidal timestep embedding `[sin(t f_i), cos(t f_i)]` with
/// `f_i = 10000^(-2i/dim)`, shape `[len(t), dim]`.
pub fn sinusoidal_time_embedding<T: Scalar>(t: &[f64], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("time embedding dim {dim} must be even and positive")));
    }
    if t.is_empty() {
        return Err(Error::InvalidArgument("empty timestep list".into()));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let freqs = (0..half).map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64));
        let mut cos = Vec::with_capacity(half);
        for f in freqs {
            out.push(T::of((tv * f).sin()));
            cos.push(T::of((tv * f).cos()));
        }
        out.extend(cos);
    }
    Tensor::new(&[t.len(), dim], out)
}
