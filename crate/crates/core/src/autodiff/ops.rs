use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::{accumulate, shape_product, Real, Tensor};

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update running stats.
    Train,
    /// Normalize with stored running statistics.
    Eval,
}

const BCE_LO: f64 = 1e-7;
const BCE_HI: f64 = 1.0 - 1e-7;

/// Recorded operation: kind, parent references, saved backward context.
pub(super) enum Op<T: Real> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    ScalarMul(Tensor<T>, T),
    Matmul(Tensor<T>, Tensor<T>),
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Option<Tensor<T>>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Option<Tensor<T>>,
        stride: usize,
        pad: usize,
    },
    Relu(Tensor<T>),
    LeakyRelu(Tensor<T>, T),
    Sigmoid(Tensor<T>),
    Tanh(Tensor<T>),
    BatchNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Reshape(Tensor<T>),
    Concat(Vec<Tensor<T>>),
    Mean(Tensor<T>),
    Sum(Tensor<T>),
    L2Norm {
        x: Tensor<T>,
        norms: Vec<T>,
    },
    NormalizeRows {
        x: Tensor<T>,
        norms: Vec<T>,
    },
    MseLoss {
        pred: Tensor<T>,
        target: Tensor<T>,
    },
    BceLoss {
        p: Tensor<T>,
        target: Tensor<T>,
    },
}

impl<T: Real> Op<T> {
    pub(super) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::ScalarMul(x, _)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Reshape(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::L2Norm { x, .. }
            | Op::NormalizeRows { x, .. } => vec![x],
            Op::Conv2d { x, w, b, .. } | Op::ConvT2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Concat(parts) => parts.iter().collect(),
            Op::MseLoss { pred, target } => vec![pred, target],
            Op::BceLoss { p, target } => vec![p, target],
        }
    }

    /// Apply this node's vector-Jacobian product, accumulating into `grads`.
    pub(super) fn backward(
        &self,
        out: &Tensor<T>,
        gout: &[T],
        grads: &mut HashMap<u64, Vec<T>>,
    ) -> Result<()> {
        match self {
            Op::Add(a, b) => {
                accumulate(grads, a, reduce_to(gout, a.numel()));
                accumulate(grads, b, reduce_to(gout, b.numel()));
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, reduce_to(gout, a.numel()));
                let neg: Vec<T> = gout.iter().map(|&g| -g).collect();
                accumulate(grads, b, reduce_to(&neg, b.numel()));
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bb = expand_to(&b.data(), gout.len());
                    let ga: Vec<T> = gout.iter().zip(bb.iter()).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, a, reduce_to(&ga, a.numel()));
                }
                if b.requires_grad() {
                    let aa = expand_to(&a.data(), gout.len());
                    let gb: Vec<T> = gout.iter().zip(aa.iter()).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, b, reduce_to(&gb, b.numel()));
                }
            }
            Op::ScalarMul(x, k) => {
                accumulate(grads, x, gout.iter().map(|&g| g * *k).collect());
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    accumulate(grads, a, mm_abt(gout, &b.data(), m, n, k));
                }
                if b.requires_grad() {
                    accumulate(grads, b, mm_atb(&a.data(), gout, m, k, n));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                conv2d_backward(x, w, b.as_ref(), *stride, *pad, out.shape(), gout, grads);
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                convt2d_backward(x, w, b.as_ref(), *stride, *pad, out.shape(), gout, grads);
            }
            Op::Relu(x) => {
                let xd = x.data();
                let g: Vec<T> = gout
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                    .collect();
                drop(xd);
                accumulate(grads, x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let xd = x.data();
                let g: Vec<T> = gout
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > T::ZERO { g } else { g * *slope })
                    .collect();
                drop(xd);
                accumulate(grads, x, g);
            }
            Op::Sigmoid(x) => {
                let yd = out.data();
                let g: Vec<T> = gout
                    .iter()
                    .zip(yd.iter())
                    .map(|(&g, &y)| g * y * (T::ONE - y))
                    .collect();
                drop(yd);
                accumulate(grads, x, g);
            }
            Op::Tanh(x) => {
                let yd = out.data();
                let g: Vec<T> = gout
                    .iter()
                    .zip(yd.iter())
                    .map(|(&g, &y)| g * (T::ONE - y * y))
                    .collect();
                drop(yd);
                accumulate(grads, x, g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                bn_backward(x, gamma, beta, mean, inv_std, *train, gout, grads);
            }
            Op::Reshape(x) => {
                accumulate(grads, x, gout.to_vec());
            }
            Op::Concat(parts) => {
                let rows = parts[0].shape()[0];
                let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
                let total: usize = widths.iter().sum();
                for (pi, part) in parts.iter().enumerate() {
                    if !part.requires_grad() {
                        continue;
                    }
                    let w = widths[pi];
                    let off: usize = widths[..pi].iter().sum();
                    let mut g = vec![T::ZERO; rows * w];
                    for r in 0..rows {
                        g[r * w..(r + 1) * w]
                            .copy_from_slice(&gout[r * total + off..r * total + off + w]);
                    }
                    accumulate(grads, part, g);
                }
            }
            Op::Mean(x) => {
                let scale = gout[0] / T::from_usize(x.numel());
                accumulate(grads, x, vec![scale; x.numel()]);
            }
            Op::Sum(x) => {
                accumulate(grads, x, vec![gout[0]; x.numel()]);
            }
            Op::L2Norm { x, norms } => {
                let xd = x.data();
                let cols = x.shape()[1];
                let mut g = vec![T::ZERO; xd.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm > T::ZERO {
                        let scale = gout[r] / norm;
                        for c in 0..cols {
                            g[r * cols + c] = xd[r * cols + c] * scale;
                        }
                    }
                }
                drop(xd);
                accumulate(grads, x, g);
            }
            Op::NormalizeRows { x, norms } => {
                let yd = out.data();
                let cols = x.shape()[1];
                let mut g = vec![T::ZERO; yd.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let y = &yd[r * cols..(r + 1) * cols];
                    let go = &gout[r * cols..(r + 1) * cols];
                    let dot: T = go.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        g[r * cols + c] = (go[c] - y[c] * dot) / norm;
                    }
                }
                drop(yd);
                accumulate(grads, x, g);
            }
            Op::MseLoss { pred, target } => {
                let scale = gout[0] * T::from_f64(2.0) / T::from_usize(pred.numel());
                let pd = pred.data();
                let td = target.data();
                if pred.requires_grad() {
                    let g: Vec<T> = pd
                        .iter()
                        .zip(td.iter())
                        .map(|(&p, &t)| scale * (p - t))
                        .collect();
                    accumulate(grads, pred, g);
                }
                if target.requires_grad() {
                    let g: Vec<T> = pd
                        .iter()
                        .zip(td.iter())
                        .map(|(&p, &t)| -scale * (p - t))
                        .collect();
                    accumulate(grads, target, g);
                }
            }
            Op::BceLoss { p, target } => {
                let lo = T::from_f64(BCE_LO);
                let hi = T::from_f64(BCE_HI);
                let scale = gout[0] / T::from_usize(p.numel());
                let pd = p.data();
                let td = target.data();
                if p.requires_grad() {
                    let g: Vec<T> = pd
                        .iter()
                        .zip(td.iter())
                        .map(|(&pv, &t)| {
                            if pv < lo || pv > hi {
                                T::ZERO
                            } else {
                                scale * (pv - t) / (pv * (T::ONE - pv))
                            }
                        })
                        .collect();
                    accumulate(grads, p, g);
                }
                if target.requires_grad() {
                    let g: Vec<T> = pd
                        .iter()
                        .map(|&pv| {
                            let pc = pv.maximum(lo).minimum(hi);
                            scale * ((T::ONE - pc).ln() - pc.ln())
                        })
                        .collect();
                    accumulate(grads, target, g);
                }
            }
        }
        Ok(())
    }
}

// ── shape and broadcast plumbing ─────────────────────────────────────

fn shape_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: format!("{:?}", a.shape()),
        rhs: format!("{:?}", b.shape()),
    }
}

fn ensure_finite<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Broadcast relationship for elementwise ops: identical shapes, a scalar
/// operand, or the smaller operand repeated over the leading batch axis.
fn bcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs == rhs
        || shape_product(lhs) == 1
        || shape_product(rhs) == 1
        || (lhs.len() == rhs.len() + 1 && &lhs[1..] == rhs)
        || (rhs.len() == lhs.len() + 1 && &rhs[1..] == lhs)
}

/// Tile `small` until it covers `len` elements (no-op when equal).
fn expand_to<T: Real>(small: &[T], len: usize) -> Vec<T> {
    if small.len() == len {
        return small.to_vec();
    }
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        out.extend_from_slice(small);
    }
    out
}

/// Sum a full-size gradient down to the broadcast operand's size.
fn reduce_to<T: Real>(g: &[T], numel: usize) -> Vec<T> {
    if g.len() == numel {
        return g.to_vec();
    }
    if numel == 1 {
        return vec![g.iter().copied().sum()];
    }
    let mut out = vec![T::ZERO; numel];
    for chunk in g.chunks_exact(numel) {
        for (o, &v) in out.iter_mut().zip(chunk.iter()) {
            *o += v;
        }
    }
    out
}

fn ew<T: Real>(
    op: &'static str,
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>)> {
    ensure_finite(lhs, op)?;
    ensure_finite(rhs, op)?;
    if !bcast_ok(lhs.shape(), rhs.shape()) {
        return Err(shape_err(op, lhs, rhs));
    }
    let (big, small, swapped) = if lhs.numel() >= rhs.numel() {
        (lhs, rhs, false)
    } else {
        (rhs, lhs, true)
    };
    let bd = big.data();
    let sd = expand_to(&small.data(), bd.len());
    let out: Vec<T> = bd
        .iter()
        .zip(sd.iter())
        .map(|(&b, &s)| if swapped { f(s, b) } else { f(b, s) })
        .collect();
    Ok((out, big.shape().to_vec()))
}

// ── matmul kernels ───────────────────────────────────────────────────

/// (m,k) x (k,n) -> (m,n)
fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// g (m,n) x b^T (n,k as rows of b) -> (m,k)
fn mm_abt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::ZERO;
            for (&gv, &bv) in grow.iter().zip(brow.iter()) {
                acc += gv * bv;
            }
            *o = acc;
        }
    }
    out
}

/// a^T (k,m) x g (m,n) -> (k,n)
fn mm_atb<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
    out
}

// ── convolution kernels ──────────────────────────────────────────────

/// Valid output-index range for one kernel tap: all `o` in `[lo, hi]` with
/// `o*stride + k - pad` inside `[0, in_dim)`, clamped to `[0, out_dim)`.
fn tap_range(
    pad: usize,
    k: usize,
    stride: usize,
    in_dim: usize,
    out_dim: usize,
) -> Option<(usize, usize)> {
    let s = stride as isize;
    let num = pad as isize - k as isize;
    let mut lo = num.div_euclid(s);
    if num.rem_euclid(s) != 0 {
        lo += 1;
    }
    let lo = lo.max(0);
    let hi = (in_dim as isize - 1 + pad as isize - k as isize).div_euclid(s);
    let hi = hi.min(out_dim as isize - 1);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

fn conv_out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (in_dim + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    bsz: usize,
    ci_n: usize,
    h: usize,
    wd: usize,
    co_n: usize,
    kh_n: usize,
    kw_n: usize,
    stride: usize,
    pad: usize,
    oh_n: usize,
    ow_n: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; bsz * co_n * oh_n * ow_n];
    if let Some(bias) = bias {
        for bi in 0..bsz {
            for co in 0..co_n {
                let off = (bi * co_n + co) * oh_n * ow_n;
                out[off..off + oh_n * ow_n].fill(bias[co]);
            }
        }
    }
    for bi in 0..bsz {
        for co in 0..co_n {
            let o_off = (bi * co_n + co) * oh_n * ow_n;
            for ci in 0..ci_n {
                let xplane = &x[(bi * ci_n + ci) * h * wd..][..h * wd];
                let wk = &w[(co * ci_n + ci) * kh_n * kw_n..][..kh_n * kw_n];
                for kh in 0..kh_n {
                    let Some((oh_lo, oh_hi)) = tap_range(pad, kh, stride, h, oh_n) else {
                        continue;
                    };
                    for kw in 0..kw_n {
                        let wv = wk[kh * kw_n + kw];
                        let Some((ow_lo, ow_hi)) = tap_range(pad, kw, stride, wd, ow_n) else {
                            continue;
                        };
                        for oh in oh_lo..=oh_hi {
                            let ih = oh * stride + kh - pad;
                            let xrow = &xplane[ih * wd..][..wd];
                            let orow = &mut out[o_off + oh * ow_n..][..ow_n];
                            let mut iw = ow_lo * stride + kw - pad;
                            for o in orow[ow_lo..=ow_hi].iter_mut() {
                                *o += wv * xrow[iw];
                                iw += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
    gout: &[T],
    grads: &mut HashMap<u64, Vec<T>>,
) {
    let (bsz, ci_n, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co_n, kh_n, kw_n) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh_n, ow_n) = (out_shape[2], out_shape[3]);
    let xd = x.data();
    let wdat = w.data();

    let want_dx = x.requires_grad();
    let want_dw = w.requires_grad();
    let mut dx = if want_dx {
        vec![T::ZERO; xd.len()]
    } else {
        Vec::new()
    };
    let mut dw = if want_dw {
        vec![T::ZERO; wdat.len()]
    } else {
        Vec::new()
    };

    if want_dx || want_dw {
        for bi in 0..bsz {
            for co in 0..co_n {
                let g_off = (bi * co_n + co) * oh_n * ow_n;
                for ci in 0..ci_n {
                    let x_off = (bi * ci_n + ci) * h * wd;
                    let w_off = (co * ci_n + ci) * kh_n * kw_n;
                    for kh in 0..kh_n {
                        let Some((oh_lo, oh_hi)) = tap_range(pad, kh, stride, h, oh_n) else {
                            continue;
                        };
                        for kw in 0..kw_n {
                            let Some((ow_lo, ow_hi)) = tap_range(pad, kw, stride, wd, ow_n)
                            else {
                                continue;
                            };
                            let wv = wdat[w_off + kh * kw_n + kw];
                            let mut dw_acc = T::ZERO;
                            for oh in oh_lo..=oh_hi {
                                let ih = oh * stride + kh - pad;
                                let grow = &gout[g_off + oh * ow_n..][..ow_n];
                                let mut iw = ow_lo * stride + kw - pad;
                                for &gv in grow[ow_lo..=ow_hi].iter() {
                                    if want_dw {
                                        dw_acc += gv * xd[x_off + ih * wd + iw];
                                    }
                                    if want_dx {
                                        dx[x_off + ih * wd + iw] += gv * wv;
                                    }
                                    iw += stride;
                                }
                            }
                            if want_dw {
                                dw[w_off + kh * kw_n + kw] += dw_acc;
                            }
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    drop(wdat);
    if want_dx {
        accumulate(grads, x, dx);
    }
    if want_dw {
        accumulate(grads, w, dw);
    }
    if let Some(b) = b {
        if b.requires_grad() {
            let mut db = vec![T::ZERO; co_n];
            for bi in 0..bsz {
                for co in 0..co_n {
                    let g_off = (bi * co_n + co) * oh_n * ow_n;
                    db[co] += gout[g_off..g_off + oh_n * ow_n].iter().copied().sum();
                }
            }
            accumulate(grads, b, db);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn convt2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    bsz: usize,
    ci_n: usize,
    h: usize,
    wd: usize,
    co_n: usize,
    kh_n: usize,
    kw_n: usize,
    stride: usize,
    pad: usize,
    oh_n: usize,
    ow_n: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; bsz * co_n * oh_n * ow_n];
    for bi in 0..bsz {
        for co in 0..co_n {
            let o_off = (bi * co_n + co) * oh_n * ow_n;
            for ci in 0..ci_n {
                let xplane = &x[(bi * ci_n + ci) * h * wd..][..h * wd];
                let wk = &w[(ci * co_n + co) * kh_n * kw_n..][..kh_n * kw_n];
                for kh in 0..kh_n {
                    // ih*s + kh - pad must land in [0, oh_n)
                    let Some((ih_lo, ih_hi)) = tap_range(pad, kh, stride, oh_n, h) else {
                        continue;
                    };
                    for kw in 0..kw_n {
                        let wv = wk[kh * kw_n + kw];
                        let Some((iw_lo, iw_hi)) = tap_range(pad, kw, stride, ow_n, wd) else {
                            continue;
                        };
                        for ih in ih_lo..=ih_hi {
                            let oh = ih * stride + kh - pad;
                            let xrow = &xplane[ih * wd..][..wd];
                            let orow = &mut out[o_off + oh * ow_n..][..ow_n];
                            let mut ow = iw_lo * stride + kw - pad;
                            for &xv in xrow[iw_lo..=iw_hi].iter() {
                                orow[ow] += wv * xv;
                                ow += stride;
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                for o in out[o_off..o_off + oh_n * ow_n].iter_mut() {
                    *o += bias[co];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn convt2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
    gout: &[T],
    grads: &mut HashMap<u64, Vec<T>>,
) {
    let (bsz, ci_n, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co_n, kh_n, kw_n) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh_n, ow_n) = (out_shape[2], out_shape[3]);
    let xd = x.data();
    let wdat = w.data();

    let want_dx = x.requires_grad();
    let want_dw = w.requires_grad();
    let mut dx = if want_dx {
        vec![T::ZERO; xd.len()]
    } else {
        Vec::new()
    };
    let mut dw = if want_dw {
        vec![T::ZERO; wdat.len()]
    } else {
        Vec::new()
    };

    if want_dx || want_dw {
        for bi in 0..bsz {
            for co in 0..co_n {
                let g_off = (bi * co_n + co) * oh_n * ow_n;
                for ci in 0..ci_n {
                    let x_off = (bi * ci_n + ci) * h * wd;
                    let w_off = (ci * co_n + co) * kh_n * kw_n;
                    for kh in 0..kh_n {
                        let Some((ih_lo, ih_hi)) = tap_range(pad, kh, stride, oh_n, h) else {
                            continue;
                        };
                        for kw in 0..kw_n {
                            let Some((iw_lo, iw_hi)) = tap_range(pad, kw, stride, ow_n, wd)
                            else {
                                continue;
                            };
                            let wv = wdat[w_off + kh * kw_n + kw];
                            let mut dw_acc = T::ZERO;
                            for ih in ih_lo..=ih_hi {
                                let oh = ih * stride + kh - pad;
                                let grow = &gout[g_off + oh * ow_n..][..ow_n];
                                let mut ow = iw_lo * stride + kw - pad;
                                for iw in iw_lo..=iw_hi {
                                    let gv = grow[ow];
                                    if want_dw {
                                        dw_acc += gv * xd[x_off + ih * wd + iw];
                                    }
                                    if want_dx {
                                        dx[x_off + ih * wd + iw] += gv * wv;
                                    }
                                    ow += stride;
                                }
                            }
                            if want_dw {
                                dw[w_off + kh * kw_n + kw] += dw_acc;
                            }
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    drop(wdat);
    if want_dx {
        accumulate(grads, x, dx);
    }
    if want_dw {
        accumulate(grads, w, dw);
    }
    if let Some(b) = b {
        if b.requires_grad() {
            let mut db = vec![T::ZERO; co_n];
            for bi in 0..bsz {
                for co in 0..co_n {
                    let g_off = (bi * co_n + co) * oh_n * ow_n;
                    db[co] += gout[g_off..g_off + oh_n * ow_n].iter().copied().sum();
                }
            }
            accumulate(grads, b, db);
        }
    }
}

// ── batch norm ───────────────────────────────────────────────────────

/// (batch, channels, per-channel plane size) for 2D or 4D input.
fn bn_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    train: bool,
    gout: &[T],
    grads: &mut HashMap<u64, Vec<T>>,
) {
    let (bsz, c_n, plane) = bn_dims(x.shape()).expect("validated in forward");
    let m = T::from_usize(bsz * plane);
    let xd = x.data();
    let gd = gamma.data();

    // Per-channel sums of g and g*xhat.
    let mut s1 = vec![T::ZERO; c_n];
    let mut s2 = vec![T::ZERO; c_n];
    for bi in 0..bsz {
        for c in 0..c_n {
            let off = (bi * c_n + c) * plane;
            let mut a1 = T::ZERO;
            let mut a2 = T::ZERO;
            for i in 0..plane {
                let g = gout[off + i];
                let xhat = (xd[off + i] - mean[c]) * inv_std[c];
                a1 += g;
                a2 += g * xhat;
            }
            s1[c] += a1;
            s2[c] += a2;
        }
    }

    if x.requires_grad() {
        let mut dx = vec![T::ZERO; xd.len()];
        for bi in 0..bsz {
            for c in 0..c_n {
                let off = (bi * c_n + c) * plane;
                let k = gd[c] * inv_std[c];
                if train {
                    let mean_g = s1[c] / m;
                    let mean_gx = s2[c] / m;
                    for i in 0..plane {
                        let xhat = (xd[off + i] - mean[c]) * inv_std[c];
                        dx[off + i] = k * (gout[off + i] - mean_g - xhat * mean_gx);
                    }
                } else {
                    for i in 0..plane {
                        dx[off + i] = k * gout[off + i];
                    }
                }
            }
        }
        accumulate(grads, x, dx);
    }
    drop(xd);
    drop(gd);
    if gamma.requires_grad() {
        accumulate(grads, gamma, s2);
    }
    if beta.requires_grad() {
        accumulate(grads, beta, s1);
    }
}

// ── public forward ops ───────────────────────────────────────────────

impl<T: Real> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = ew("add", self, rhs, |a, b| a + b)?;
        let tracked = self.requires_grad() || rhs.requires_grad();
        Ok(Tensor::from_op(
            data,
            shape,
            tracked,
            Op::Add(self.clone(), rhs.clone()),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = ew("subtract", self, rhs, |a, b| a - b)?;
        let tracked = self.requires_grad() || rhs.requires_grad();
        Ok(Tensor::from_op(
            data,
            shape,
            tracked,
            Op::Sub(self.clone(), rhs.clone()),
        ))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = ew("multiply", self, rhs, |a, b| a * b)?;
        let tracked = self.requires_grad() || rhs.requires_grad();
        Ok(Tensor::from_op(
            data,
            shape,
            tracked,
            Op::Mul(self.clone(), rhs.clone()),
        ))
    }

    pub fn scalar_mul(&self, k: T) -> Result<Tensor<T>> {
        ensure_finite(self, "scalar_mul")?;
        if !k.is_finite() {
            return Err(Error::NonFinite { op: "scalar_mul" });
        }
        let data: Vec<T> = self.data().iter().map(|&v| v * k).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            self.requires_grad(),
            Op::ScalarMul(self.clone(), k),
        ))
    }

    /// 2D matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        ensure_finite(self, "matmul")?;
        ensure_finite(rhs, "matmul")?;
        if self.ndim() != 2 || rhs.ndim() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(shape_err("matmul", self, rhs));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let data = mm(&self.data(), &rhs.data(), m, k, n);
        let tracked = self.requires_grad() || rhs.requires_grad();
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            tracked,
            Op::Matmul(self.clone(), rhs.clone()),
        ))
    }

    /// 2D convolution over (batch, channel, height, width) input with an
    /// (out_ch, in_ch, kh, kw) kernel, zero padding.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        ensure_finite(self, "conv2d")?;
        ensure_finite(kernel, "conv2d")?;
        if stride == 0 {
            return Err(Error::InvalidInput("conv2d: stride must be >= 1".into()));
        }
        if self.ndim() != 4 || kernel.ndim() != 4 || self.shape()[1] != kernel.shape()[1] {
            return Err(shape_err("conv2d", self, kernel));
        }
        let (bsz, ci_n, h, wd) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (co_n, kh_n, kw_n) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let (Some(oh_n), Some(ow_n)) = (
            conv_out_dim(h, kh_n, stride, pad),
            conv_out_dim(wd, kw_n, stride, pad),
        ) else {
            return Err(shape_err("conv2d", self, kernel));
        };
        if let Some(b) = bias {
            ensure_finite(b, "conv2d")?;
            if b.numel() != co_n {
                return Err(shape_err("conv2d bias", kernel, b));
            }
        }
        let data = conv2d_forward(
            &self.data(),
            &kernel.data(),
            bias.map(|b| b.to_vec()).as_deref(),
            bsz,
            ci_n,
            h,
            wd,
            co_n,
            kh_n,
            kw_n,
            stride,
            pad,
            oh_n,
            ow_n,
        );
        let tracked = self.requires_grad()
            || kernel.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        Ok(Tensor::from_op(
            data,
            vec![bsz, co_n, oh_n, ow_n],
            tracked,
            Op::Conv2d {
                x: self.clone(),
                w: kernel.clone(),
                b: bias.cloned(),
                stride,
                pad,
            },
        ))
    }

    /// Transposed 2D convolution (gradient-adjoint of [`conv2d`](Self::conv2d)
    /// at matching stride/pad) with an (in_ch, out_ch, kh, kw) kernel.
    pub fn conv_transpose2d(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        ensure_finite(self, "conv_transpose2d")?;
        ensure_finite(kernel, "conv_transpose2d")?;
        if stride == 0 {
            return Err(Error::InvalidInput(
                "conv_transpose2d: stride must be >= 1".into(),
            ));
        }
        if self.ndim() != 4 || kernel.ndim() != 4 || self.shape()[1] != kernel.shape()[0] {
            return Err(shape_err("conv_transpose2d", self, kernel));
        }
        let (bsz, ci_n, h, wd) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (co_n, kh_n, kw_n) = (kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
        let (oh_n, ow_n) = (
            (h - 1) * stride + kh_n,
            (wd - 1) * stride + kw_n,
        );
        let (Some(oh_n), Some(ow_n)) = (
            oh_n.checked_sub(2 * pad).filter(|&d| d > 0),
            ow_n.checked_sub(2 * pad).filter(|&d| d > 0),
        ) else {
            return Err(shape_err("conv_transpose2d", self, kernel));
        };
        if let Some(b) = bias {
            ensure_finite(b, "conv_transpose2d")?;
            if b.numel() != co_n {
                return Err(shape_err("conv_transpose2d bias", kernel, b));
            }
        }
        let data = convt2d_forward(
            &self.data(),
            &kernel.data(),
            bias.map(|b| b.to_vec()).as_deref(),
            bsz,
            ci_n,
            h,
            wd,
            co_n,
            kh_n,
            kw_n,
            stride,
            pad,
            oh_n,
            ow_n,
        );
        let tracked = self.requires_grad()
            || kernel.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        Ok(Tensor::from_op(
            data,
            vec![bsz, co_n, oh_n, ow_n],
            tracked,
            Op::ConvT2d {
                x: self.clone(),
                w: kernel.clone(),
                b: bias.cloned(),
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        ensure_finite(self, "relu")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            self.requires_grad(),
            Op::Relu(self.clone()),
        ))
    }

    pub fn leaky_relu(&self, slope: T) -> Result<Tensor<T>> {
        ensure_finite(self, "leaky_relu")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { v * slope })
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            self.requires_grad(),
            Op::LeakyRelu(self.clone(), slope),
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        ensure_finite(self, "sigmoid")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| {
                if v >= T::ZERO {
                    T::ONE / (T::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::ONE + e)
                }
            })
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            self.requires_grad(),
            Op::Sigmoid(self.clone()),
        ))
    }

    pub fn tanh(&self) -> Result<Tensor<T>> {
        ensure_finite(self, "tanh")?;
        let data: Vec<T> = self.data().iter().map(|&v| Real::tanh(v)).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            self.requires_grad(),
            Op::Tanh(self.clone()),
        ))
    }

    /// Per-channel batch normalization over (B,C) or (B,C,H,W) input.
    /// `Train` mode normalizes with batch statistics and folds them into the
    /// running stats in place; `Eval` normalizes with the running stats.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: BnMode,
        momentum: T,
        eps: T,
    ) -> Result<Tensor<T>> {
        ensure_finite(self, "batch_norm")?;
        ensure_finite(gamma, "batch_norm")?;
        ensure_finite(beta, "batch_norm")?;
        let Some((bsz, c_n, plane)) = bn_dims(self.shape()) else {
            return Err(Error::InvalidInput(format!(
                "batch_norm: expected 2D or 4D input, got {:?}",
                self.shape()
            )));
        };
        for (name, t) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.numel() != c_n {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: format!("{:?}", self.shape()),
                    rhs: format!("{name} {:?}", t.shape()),
                });
            }
        }
        if running_mean.requires_grad() || running_var.requires_grad() {
            return Err(Error::InvalidInput(
                "batch_norm: running statistics must not require grad".into(),
            ));
        }

        let xd = self.data();
        let m = bsz * plane;
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::ZERO; c_n];
                for bi in 0..bsz {
                    for c in 0..c_n {
                        let off = (bi * c_n + c) * plane;
                        for i in 0..plane {
                            mean[c] += xd[off + i];
                        }
                    }
                }
                for v in mean.iter_mut() {
                    *v = *v / T::from_usize(m);
                }
                let mut var = vec![T::ZERO; c_n];
                for bi in 0..bsz {
                    for c in 0..c_n {
                        let off = (bi * c_n + c) * plane;
                        for i in 0..plane {
                            let d = xd[off + i] - mean[c];
                            var[c] += d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / T::from_usize(m);
                }
                // Fold into running stats: r <- (1-momentum)*r + momentum*batch.
                {
                    let mut rm = running_mean.data_mut();
                    let mut rv = running_var.data_mut();
                    for c in 0..c_n {
                        rm[c] = (T::ONE - momentum) * rm[c] + momentum * mean[c];
                        rv[c] = (T::ONE - momentum) * rv[c] + momentum * var[c];
                    }
                }
                (mean, var)
            }
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();

        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![T::ZERO; xd.len()];
        for bi in 0..bsz {
            for c in 0..c_n {
                let off = (bi * c_n + c) * plane;
                let k = gd[c] * inv_std[c];
                for i in 0..plane {
                    out[off + i] = (xd[off + i] - mean[c]) * k + bd[c];
                }
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);

        let tracked =
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            tracked,
            Op::BatchNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean,
                inv_std,
                train: mode == BnMode::Train,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape_product(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: format!("{:?}", self.shape()),
                rhs: format!("{shape:?}"),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            self.requires_grad(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Collapse all but the leading batch axis: (B, ...) -> (B, rest).
    pub fn flatten(&self) -> Result<Tensor<T>> {
        if self.ndim() < 1 {
            return Err(Error::InvalidInput("flatten: rank-0 tensor".into()));
        }
        let b = self.shape()[0];
        self.reshape(&[b, self.numel() / b.max(1)])
    }

    /// Concatenate 2D tensors along the feature axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let rows = parts[0].shape()[0];
        for p in parts {
            ensure_finite(p, "concat")?;
            if p.ndim() != 2 || p.shape()[0] != rows {
                return Err(shape_err("concat", parts[0], p));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = vec![T::ZERO; rows * total];
        let mut off = 0;
        for p in parts {
            let w = p.shape()[1];
            let pd = p.data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let tracked = parts.iter().any(|p| p.requires_grad());
        Ok(Tensor::from_op(
            data,
            vec![rows, total],
            tracked,
            Op::Concat(parts.iter().map(|p| (*p).clone()).collect()),
        ))
    }

    /// Mean of all elements, as a single-element tensor.
    pub fn mean(&self) -> Result<Tensor<T>> {
        ensure_finite(self, "mean")?;
        if self.numel() == 0 {
            return Err(Error::Empty("mean"));
        }
        let s: T = self.data().iter().copied().sum();
        Ok(Tensor::from_op(
            vec![s / T::from_usize(self.numel())],
            vec![1],
            self.requires_grad(),
            Op::Mean(self.clone()),
        ))
    }

    /// Sum of all elements, as a single-element tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        ensure_finite(self, "sum")?;
        let s: T = self.data().iter().copied().sum();
        Ok(Tensor::from_op(
            vec![s],
            vec![1],
            self.requires_grad(),
            Op::Sum(self.clone()),
        ))
    }

    /// Row-wise Euclidean norm of a (B,F) tensor: output shape (B,).
    pub fn l2_norm(&self) -> Result<Tensor<T>> {
        ensure_finite(self, "l2_norm")?;
        if self.ndim() != 2 {
            return Err(Error::InvalidInput(format!(
                "l2_norm: expected 2D input, got {:?}",
                self.shape()
            )));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let xd = self.data();
        let norms: Vec<T> = (0..rows)
            .map(|r| {
                xd[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|&v| v * v)
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        drop(xd);
        Ok(Tensor::from_op(
            norms.clone(),
            vec![rows],
            self.requires_grad(),
            Op::L2Norm {
                x: self.clone(),
                norms,
            },
        ))
    }

    /// Scale each row to unit Euclidean norm. Errors on any row whose norm
    /// is at or below `floor`.
    pub fn normalize_rows(&self, floor: T) -> Result<Tensor<T>> {
        ensure_finite(self, "normalize_rows")?;
        if self.ndim() != 2 {
            return Err(Error::InvalidInput(format!(
                "normalize_rows: expected 2D input, got {:?}",
                self.shape()
            )));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let xd = self.data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::ZERO; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= floor {
                return Err(Error::DegenerateLatent {
                    row: r,
                    norm: norm.to_f64(),
                    floor: floor.to_f64(),
                });
            }
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        drop(xd);
        let t = Tensor::from_op(
            out,
            self.shape().to_vec(),
            self.requires_grad(),
            Op::NormalizeRows {
                x: self.clone(),
                norms,
            },
        );
        t.mark_sphere_projected();
        Ok(t)
    }

    /// Mean squared error over all elements, as a single-element tensor.
    pub fn mse_loss(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        ensure_finite(self, "mse_loss")?;
        ensure_finite(target, "mse_loss")?;
        if self.shape() != target.shape() {
            return Err(shape_err("mse_loss", self, target));
        }
        let n = T::from_usize(self.numel());
        let s: T = self
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let tracked = self.requires_grad() || target.requires_grad();
        Ok(Tensor::from_op(
            vec![s / n],
            vec![1],
            tracked,
            Op::MseLoss {
                pred: self.clone(),
                target: target.clone(),
            },
        ))
    }

    /// Binary cross-entropy from probabilities, clamped to
    /// [1e-7, 1 - 1e-7] before the logs.
    pub fn bce_loss(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        ensure_finite(self, "bce_loss")?;
        ensure_finite(target, "bce_loss")?;
        if self.shape() != target.shape() {
            return Err(shape_err("bce_loss", self, target));
        }
        let lo = T::from_f64(BCE_LO);
        let hi = T::from_f64(BCE_HI);
        let n = T::from_usize(self.numel());
        let s: T = self
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(&p, &t)| {
                let pc = p.maximum(lo).minimum(hi);
                -(t * pc.ln() + (T::ONE - t) * (T::ONE - pc).ln())
            })
            .sum();
        let tracked = self.requires_grad() || target.requires_grad();
        Ok(Tensor::from_op(
            vec![s / n],
            vec![1],
            tracked,
            Op::BceLoss {
                p: self.clone(),
                target: target.clone(),
            },
        ))
    }
}
