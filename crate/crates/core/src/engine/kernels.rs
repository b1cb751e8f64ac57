//! Dense numeric kernels shared by op forward and backward passes.
//!
//! Convolution runs as im2col + GEMM; the GEMM is deterministic and the
//! batch loop either runs serially or splits across rayon workers into
//! disjoint output slices, so results are bit-identical regardless of
//! thread count.

use rayon::prelude::*;

use super::graph::{ConvDims, ConvTDims};
use super::scalar::{gemm_nn, gemm_nt, gemm_tn, Scalar};

/// Work threshold (in multiply-accumulates per batch item) below which
/// parallelizing over the batch is not worth the scheduling cost.
const PAR_MACS: usize = 200_000;

fn par_batch<T: Scalar>(
    out: &mut [T],
    per_sample: usize,
    macs_per_sample: usize,
    f: impl Fn(usize, &mut [T]) + Sync,
) {
    if out.len() / per_sample > 1 && macs_per_sample >= PAR_MACS {
        out.par_chunks_mut(per_sample)
            .enumerate()
            .for_each(|(b, chunk)| f(b, chunk));
    } else {
        for (b, chunk) in out.chunks_mut(per_sample).enumerate() {
            f(b, chunk);
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d

/// Expands one sample into a `[ci*kh*kw, ho*wo]` patch matrix.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let cols = d.ho * d.wo;
    for ci in 0..d.ci {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh * d.kw + ky * d.kw + kx) * cols;
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    let out_row = &mut col[row + oy * d.wo..row + (oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        *o = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a `[ci*kh*kw, ho*wo]` patch-gradient matrix back onto the input.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let cols = d.ho * d.wo;
    for ci in 0..d.ci {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh * d.kw + ky * d.kw + kx) * cols;
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * d.wo..row + (oy + 1) * d.wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            let p = iy as usize * d.w + ix as usize;
                            plane[p] = plane[p] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_fwd<T: Scalar>(x: &[T], w: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let in_per = d.ci * d.h * d.w;
    let out_per = d.co * d.ho * d.wo;
    let k = d.ci * d.kh * d.kw;
    let cols = d.ho * d.wo;
    let mut out = vec![T::zero(); d.b * out_per];
    let macs = k * cols * d.co;
    par_batch(&mut out, out_per, macs, |b, out_b| {
        let mut col = vec![T::zero(); k * cols];
        im2col(&x[b * in_per..(b + 1) * in_per], d, &mut col);
        gemm_nn(d.co, k, cols, T::one(), w, &col, T::zero(), out_b);
        for co in 0..d.co {
            let bv = bias[co];
            for v in &mut out_b[co * cols..(co + 1) * cols] {
                *v = *v + bv;
            }
        }
    });
    out
}

pub(crate) fn conv2d_bwd_input<T: Scalar>(gout: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let in_per = d.ci * d.h * d.w;
    let out_per = d.co * d.ho * d.wo;
    let k = d.ci * d.kh * d.kw;
    let cols = d.ho * d.wo;
    let mut dx = vec![T::zero(); d.b * in_per];
    let macs = k * cols * d.co;
    par_batch(&mut dx, in_per, macs, |b, dx_b| {
        let mut colgrad = vec![T::zero(); k * cols];
        gemm_tn(
            k,
            d.co,
            cols,
            T::one(),
            w,
            &gout[b * out_per..(b + 1) * out_per],
            T::zero(),
            &mut colgrad,
        );
        col2im(&colgrad, d, dx_b);
    });
    dx
}

pub(crate) fn conv2d_bwd_weight<T: Scalar>(gout: &[T], x: &[T], d: &ConvDims) -> Vec<T> {
    let in_per = d.ci * d.h * d.w;
    let out_per = d.co * d.ho * d.wo;
    let k = d.ci * d.kh * d.kw;
    let cols = d.ho * d.wo;
    let macs = k * cols * d.co;
    let per_sample = |b: usize, dw_b: &mut [T]| {
        let mut col = vec![T::zero(); k * cols];
        im2col(&x[b * in_per..(b + 1) * in_per], d, &mut col);
        gemm_nt(
            d.co,
            cols,
            k,
            T::one(),
            &gout[b * out_per..(b + 1) * out_per],
            &col,
            T::zero(),
            dw_b,
        );
    };
    if d.b > 1 && macs >= PAR_MACS {
        // Per-sample partials computed in parallel, then summed in index
        // order so the reduction stays bit-identical.
        let mut partials = vec![T::zero(); d.b * d.co * k];
        partials
            .par_chunks_mut(d.co * k)
            .enumerate()
            .for_each(|(b, dw_b)| per_sample(b, dw_b));
        let mut dw = partials[..d.co * k].to_vec();
        for b in 1..d.b {
            let part = &partials[b * d.co * k..(b + 1) * d.co * k];
            for (a, &v) in dw.iter_mut().zip(part.iter()) {
                *a = *a + v;
            }
        }
        dw
    } else {
        let mut dw = vec![T::zero(); d.co * k];
        let mut col = vec![T::zero(); k * cols];
        for b in 0..d.b {
            im2col(&x[b * in_per..(b + 1) * in_per], d, &mut col);
            gemm_nt(
                d.co,
                cols,
                k,
                T::one(),
                &gout[b * out_per..(b + 1) * out_per],
                &col,
                T::one(),
                &mut dw,
            );
        }
        dw
    }
}

pub(crate) fn conv2d_bwd_bias<T: Scalar>(gout: &[T], b: usize, co: usize, hw: usize) -> Vec<T> {
    let mut db = vec![T::zero(); co];
    for bi in 0..b {
        for c in 0..co {
            let base = (bi * co + c) * hw;
            let mut s = T::zero();
            for &g in &gout[base..base + hw] {
                s = s + g;
            }
            db[c] = db[c] + s;
        }
    }
    db
}

// ---------------------------------------------------------------------------
// conv_transpose2d (weight layout [ci, co, kh, kw])

pub(crate) fn convt_fwd<T: Scalar>(x: &[T], w: &[T], bias: &[T], d: &ConvTDims) -> Vec<T> {
    let in_per = d.ci * d.h * d.w;
    let out_per = d.co * d.ho * d.wo;
    let mut out = vec![T::zero(); d.b * out_per];
    let macs = in_per * d.co * d.kh * d.kw;
    par_batch(&mut out, out_per, macs, |b, out_b| {
        for co in 0..d.co {
            let bv = bias[co];
            for v in &mut out_b[co * d.ho * d.wo..(co + 1) * d.ho * d.wo] {
                *v = bv;
            }
        }
        let x_b = &x[b * in_per..(b + 1) * in_per];
        for ci in 0..d.ci {
            for y in 0..d.h {
                for xx in 0..d.w {
                    let v = x_b[(ci * d.h + y) * d.w + xx];
                    if v == T::zero() {
                        continue;
                    }
                    let wk = &w[ci * d.co * d.kh * d.kw..(ci + 1) * d.co * d.kh * d.kw];
                    for co in 0..d.co {
                        for ky in 0..d.kh {
                            let oy = y * d.stride + ky;
                            let orow = (co * d.ho + oy) * d.wo + xx * d.stride;
                            let wrow = (co * d.kh + ky) * d.kw;
                            for kx in 0..d.kw {
                                out_b[orow + kx] = out_b[orow + kx] + v * wk[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn convt_bwd_input<T: Scalar>(gout: &[T], w: &[T], d: &ConvTDims) -> Vec<T> {
    let in_per = d.ci * d.h * d.w;
    let out_per = d.co * d.ho * d.wo;
    let mut dx = vec![T::zero(); d.b * in_per];
    let macs = in_per * d.co * d.kh * d.kw;
    par_batch(&mut dx, in_per, macs, |b, dx_b| {
        let g_b = &gout[b * out_per..(b + 1) * out_per];
        for ci in 0..d.ci {
            let wk = &w[ci * d.co * d.kh * d.kw..(ci + 1) * d.co * d.kh * d.kw];
            for y in 0..d.h {
                for xx in 0..d.w {
                    let mut s = T::zero();
                    for co in 0..d.co {
                        for ky in 0..d.kh {
                            let oy = y * d.stride + ky;
                            let orow = (co * d.ho + oy) * d.wo + xx * d.stride;
                            let wrow = (co * d.kh + ky) * d.kw;
                            for kx in 0..d.kw {
                                s = s + g_b[orow + kx] * wk[wrow + kx];
                            }
                        }
                    }
                    dx_b[(ci * d.h + y) * d.w + xx] = s;
                }
            }
        }
    });
    dx
}

pub(crate) fn convt_bwd_weight<T: Scalar>(gout: &[T], x: &[T], d: &ConvTDims) -> Vec<T> {
    let in_per = d.ci * d.h * d.w;
    let out_per = d.co * d.ho * d.wo;
    let mut dw = vec![T::zero(); d.ci * d.co * d.kh * d.kw];
    for b in 0..d.b {
        let x_b = &x[b * in_per..(b + 1) * in_per];
        let g_b = &gout[b * out_per..(b + 1) * out_per];
        for ci in 0..d.ci {
            let wk = &mut dw[ci * d.co * d.kh * d.kw..(ci + 1) * d.co * d.kh * d.kw];
            for y in 0..d.h {
                for xx in 0..d.w {
                    let v = x_b[(ci * d.h + y) * d.w + xx];
                    if v == T::zero() {
                        continue;
                    }
                    for co in 0..d.co {
                        for ky in 0..d.kh {
                            let oy = y * d.stride + ky;
                            let orow = (co * d.ho + oy) * d.wo + xx * d.stride;
                            let wrow = (co * d.kh + ky) * d.kw;
                            for kx in 0..d.kw {
                                wk[wrow + kx] = wk[wrow + kx] + v * g_b[orow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

// ---------------------------------------------------------------------------
// instance norm (non-affine)

pub(crate) fn instance_norm_fwd<T: Scalar>(
    x: &[T],
    shape: [usize; 4],
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let [b, c, h, w] = shape;
    let n = h * w;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); b * c];
    let nf = T::from_f64(n as f64);
    let slice_job = |s: usize, out: &mut [T]| -> T {
        let slice = &x[s * n..(s + 1) * n];
        let mut sum = T::zero();
        for &v in slice {
            sum = sum + v;
        }
        let mean = sum / nf;
        let mut var = T::zero();
        for &v in slice {
            let dv = v - mean;
            var = var + dv * dv;
        }
        var = var / nf;
        let is = T::one() / (var + T::from_f64(eps)).sqrt();
        for (o, &v) in out.iter_mut().zip(slice.iter()) {
            *o = (v - mean) * is;
        }
        is
    };
    if b * c > 1 && x.len() >= 1 << 15 {
        let stds: Vec<T> = xhat
            .par_chunks_mut(n)
            .enumerate()
            .map(|(s, out)| slice_job(s, out))
            .collect();
        inv_std.copy_from_slice(&stds);
    } else {
        for s in 0..b * c {
            let (lo, hi) = (s * n, (s + 1) * n);
            let mut out = std::mem::take(&mut xhat);
            inv_std[s] = slice_job(s, &mut out[lo..hi]);
            xhat = out;
        }
    }
    (xhat, inv_std)
}

pub(crate) fn instance_norm_bwd<T: Scalar>(
    gout: &[T],
    xhat: &[T],
    inv_std: &[T],
    shape: [usize; 4],
) -> Vec<T> {
    let [b, c, h, w] = shape;
    let n = h * w;
    let nf = T::from_f64(n as f64);
    let mut dx = vec![T::zero(); gout.len()];
    let slice_job = |s: usize, out: &mut [T]| {
        let g = &gout[s * n..(s + 1) * n];
        let xh = &xhat[s * n..(s + 1) * n];
        let mut g_mean = T::zero();
        let mut gx_mean = T::zero();
        for (&gi, &xi) in g.iter().zip(xh.iter()) {
            g_mean = g_mean + gi;
            gx_mean = gx_mean + gi * xi;
        }
        g_mean = g_mean / nf;
        gx_mean = gx_mean / nf;
        let is = inv_std[s];
        for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = is * (gi - g_mean - xi * gx_mean);
        }
    };
    if b * c > 1 && gout.len() >= 1 << 15 {
        dx.par_chunks_mut(n)
            .enumerate()
            .for_each(|(s, out)| slice_job(s, out));
    } else {
        for s in 0..b * c {
            let (lo, hi) = (s * n, (s + 1) * n);
            let mut out = std::mem::take(&mut dx);
            slice_job(s, &mut out[lo..hi]);
            dx = out;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// max pool 2x2 (stride 2)

pub(crate) fn max_pool2_fwd<T: Scalar>(x: &[T], shape: [usize; 4]) -> (Vec<T>, Vec<u32>) {
    let [b, c, h, w] = shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); b * c * ho * wo];
    let mut idx = vec![0u32; out.len()];
    for p in 0..b * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let base_in = p * h * w;
        let base_out = p * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (oy * 2 + dy) * w + ox * 2 + dx;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                out[base_out + oy * wo + ox] = best;
                idx[base_out + oy * wo + ox] = (base_in + best_i) as u32;
            }
        }
    }
    (out, idx)
}

// ---------------------------------------------------------------------------
// channel ops

pub(crate) fn concat_channels_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    a_shape: [usize; 4],
    b_shape: [usize; 4],
) -> Vec<T> {
    let [bn, ca, h, w] = a_shape;
    let cb = b_shape[1];
    let hw = h * w;
    let mut out = vec![T::zero(); bn * (ca + cb) * hw];
    for bi in 0..bn {
        let dst = &mut out[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
        dst[..ca * hw].copy_from_slice(&a[bi * ca * hw..(bi + 1) * ca * hw]);
        dst[ca * hw..].copy_from_slice(&b[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    out
}

pub(crate) fn concat_channels_bwd<T: Scalar>(
    gout: &[T],
    a_shape: [usize; 4],
    b_shape: [usize; 4],
) -> (Vec<T>, Vec<T>) {
    let [bn, ca, h, w] = a_shape;
    let cb = b_shape[1];
    let hw = h * w;
    let mut ga = vec![T::zero(); bn * ca * hw];
    let mut gb = vec![T::zero(); bn * cb * hw];
    for bi in 0..bn {
        let src = &gout[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
        ga[bi * ca * hw..(bi + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
        gb[bi * cb * hw..(bi + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
    }
    (ga, gb)
}

/// Softmax over the channel axis of `[b, c, h, w]`.
pub(crate) fn softmax_channels_fwd<T: Scalar>(x: &[T], shape: [usize; 4]) -> Vec<T> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    let sample_job = |bi: usize, out_b: &mut [T]| {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ci in 0..c {
                m = m.max(x[base + ci * hw + p]);
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (x[base + ci * hw + p] - m).exp();
                out_b[ci * hw + p] = e;
                sum = sum + e;
            }
            for ci in 0..c {
                out_b[ci * hw + p] = out_b[ci * hw + p] / sum;
            }
        }
    };
    if b > 1 && x.len() >= 1 << 15 {
        out.par_chunks_mut(c * hw)
            .enumerate()
            .for_each(|(bi, out_b)| sample_job(bi, out_b));
    } else {
        for bi in 0..b {
            let (lo, hi) = (bi * c * hw, (bi + 1) * c * hw);
            let mut o = std::mem::take(&mut out);
            sample_job(bi, &mut o[lo..hi]);
            out = o;
        }
    }
    out
}

pub(crate) fn softmax_channels_bwd<T: Scalar>(
    gout: &[T],
    probs: &[T],
    shape: [usize; 4],
) -> Vec<T> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut dx = vec![T::zero(); gout.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ci in 0..c {
                let i = base + ci * hw + p;
                dot = dot + gout[i] * probs[i];
            }
            for ci in 0..c {
                let i = base + ci * hw + p;
                dx[i] = probs[i] * (gout[i] - dot);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// losses

/// Returns (mean negative log-likelihood, softmax probabilities).
pub(crate) fn cross_entropy_fwd<T: Scalar>(
    logits: &[T],
    target: &[u32],
    shape: [usize; 4],
) -> (T, Vec<T>) {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let probs = softmax_channels_fwd(logits, shape);
    let mut loss = T::zero();
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let t = target[bi * hw + p] as usize;
            let pt = probs[base + t * hw + p];
            loss = loss - pt.max(T::from_f64(1e-30)).ln();
        }
    }
    (loss / T::from_f64((b * hw) as f64), probs)
}

pub(crate) fn cross_entropy_bwd<T: Scalar>(
    gout: T,
    probs: &[T],
    target: &[u32],
    shape: [usize; 4],
) -> Vec<T> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let scale = gout / T::from_f64((b * hw) as f64);
    let mut dx = vec![T::zero(); probs.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let t = target[bi * hw + p] as usize;
            for ci in 0..c {
                let i = base + ci * hw + p;
                let onehot = if ci == t { T::one() } else { T::zero() };
                dx[i] = (probs[i] - onehot) * scale;
            }
        }
    }
    dx
}

/// Soft-Dice loss over foreground channels (class 0 is background).
/// Returns (loss, probs, per-class (intersection, denominator) sums).
pub(crate) fn soft_dice_fwd<T: Scalar>(
    logits: &[T],
    target: &[u32],
    shape: [usize; 4],
    smooth: f64,
) -> (T, Vec<T>, Vec<(f64, f64)>) {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let probs = softmax_channels_fwd(logits, shape);
    let fg = c.saturating_sub(1);
    if fg == 0 {
        return (T::zero(), probs, Vec::new());
    }
    let mut sums = vec![(0.0f64, 0.0f64); fg];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let t = target[bi * hw + p] as usize;
            for ci in 1..c {
                let pv = probs[base + ci * hw + p].to_f64();
                let gv = if ci == t { 1.0 } else { 0.0 };
                let (inter, denom) = &mut sums[ci - 1];
                *inter += pv * gv;
                *denom += pv + gv;
            }
        }
    }
    let mut dice_sum = 0.0f64;
    for &(inter, denom) in &sums {
        dice_sum += (2.0 * inter + smooth) / (denom + smooth);
    }
    let loss = 1.0 - dice_sum / fg as f64;
    (T::from_f64(loss), probs, sums)
}

pub(crate) fn soft_dice_bwd<T: Scalar>(
    gout: T,
    probs: &[T],
    target: &[u32],
    shape: [usize; 4],
    smooth: f64,
    class_sums: &[(f64, f64)],
) -> Vec<T> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let fg = c.saturating_sub(1);
    let mut dx = vec![T::zero(); probs.len()];
    if fg == 0 {
        return dx;
    }
    let kf = fg as f64;
    let mut dl_dp = vec![0.0f64; c];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let t = target[bi * hw + p] as usize;
            // dLoss/dprob for each foreground channel, then chain through
            // softmax: dz_j = p_j * (dL/dp_j - sum_c dL/dp_c * p_c).
            let mut dot = 0.0f64;
            for ci in 1..c {
                let (inter, denom) = class_sums[ci - 1];
                let gv = if ci == t { 1.0 } else { 0.0 };
                let dd = (2.0 * gv * (denom + smooth) - (2.0 * inter + smooth))
                    / ((denom + smooth) * (denom + smooth));
                let v = -dd / kf;
                dl_dp[ci] = v;
                dot += v * probs[base + ci * hw + p].to_f64();
            }
            for ci in 0..c {
                let i = base + ci * hw + p;
                let pv = probs[i].to_f64();
                dx[i] = T::from_f64(pv * (dl_dp[ci] - dot)) * gout;
            }
        }
    }
    dx
}
