//! Forward and backward kernels for the tape ops.
//!
//! Convolution goes through an explicit patch-gather (im2col) feeding a
//! single blocked matmul; the quadruple-loop reference lives in test code.
//! All loops fix their accumulation order so results are bit-deterministic.

use super::{idx4, Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::PrngState;

/// `a [m,k] * b [k,n] -> [m,n]`, row-major, k-ordered accumulation.
pub(crate) fn matmul<E: Element>(a: &[E], m: usize, k: usize, b: &[E], n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += a_ik * b_row[j];
            }
        }
    }
    out
}

pub(crate) fn transpose<E: Element>(src: &[E], rows: usize, cols: usize) -> Vec<E> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![E::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv2d_check<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let (n, c, h, w) = input.dims4("conv2d")?;
    let (f, kc, kh, kw) = kernel.dims4("conv2d")?;
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            axis: "channels",
            expected: c,
            got: kc,
        });
    }
    if let Some(b) = bias {
        if b.len() != f {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "bias",
                expected: f,
                got: b.len(),
            });
        }
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "kernel {}x{} does not fit padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                w + 2 * pad
            ),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Gathers padded patches into a `[n*oh*ow, c*kh*kw]` matrix.
fn im2col<E: Element>(input: &[E], d: &ConvDims) -> Vec<E> {
    let ckk = d.c * d.kh * d.kw;
    let mut cols = vec![E::ZERO; d.n * d.oh * d.ow * ckk];
    for n in 0..d.n {
        for oh in 0..d.oh {
            let ih0 = (oh * d.stride) as isize - d.pad as isize;
            for ow in 0..d.ow {
                let iw0 = (ow * d.stride) as isize - d.pad as isize;
                let row = ((n * d.oh + oh) * d.ow + ow) * ckk;
                for c in 0..d.c {
                    for ki in 0..d.kh {
                        let ih = ih0 + ki as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        for kj in 0..d.kw {
                            let iw = iw0 + kj as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            cols[row + (c * d.kh + ki) * d.kw + kj] =
                                input[idx4(d.c, d.h, d.w, n, c, ih as usize, iw as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `[n*oh*ow, c*kh*kw]` gradient matrix back onto the input.
fn col2im_add<E: Element>(cols: &[E], d: &ConvDims) -> Vec<E> {
    let ckk = d.c * d.kh * d.kw;
    let mut out = vec![E::ZERO; d.n * d.c * d.h * d.w];
    for n in 0..d.n {
        for oh in 0..d.oh {
            let ih0 = (oh * d.stride) as isize - d.pad as isize;
            for ow in 0..d.ow {
                let iw0 = (ow * d.stride) as isize - d.pad as isize;
                let row = ((n * d.oh + oh) * d.ow + ow) * ckk;
                for c in 0..d.c {
                    for ki in 0..d.kh {
                        let ih = ih0 + ki as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        for kj in 0..d.kw {
                            let iw = iw0 + kj as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            out[idx4(d.c, d.h, d.w, n, c, ih as usize, iw as usize)] +=
                                cols[row + (c * d.kh + ki) * d.kw + kj];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    d: &ConvDims,
) -> Tensor<E> {
    let ckk = d.c * d.kh * d.kw;
    let rows = d.n * d.oh * d.ow;
    let cols = im2col(input.data(), d);
    // kernel is [f, ckk] row-major; matmul wants it as [ckk, f]
    let k_t = transpose(kernel.data(), d.f, ckk);
    let out_mat = matmul(&cols, rows, ckk, &k_t, d.f);
    let mut out = vec![E::ZERO; d.n * d.f * d.oh * d.ow];
    for n in 0..d.n {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let row = ((n * d.oh + oh) * d.ow + ow) * d.f;
                for f in 0..d.f {
                    let mut v = out_mat[row + f];
                    if let Some(b) = bias {
                        v += b.data()[f];
                    }
                    out[idx4(d.f, d.oh, d.ow, n, f, oh, ow)] = v;
                }
            }
        }
    }
    Tensor::from_vec(&[d.n, d.f, d.oh, d.ow], out).expect("conv2d output shape")
}

pub(crate) struct ConvGrads<E: Element> {
    pub input: Option<Vec<E>>,
    pub kernel: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

pub(crate) fn conv2d_backward<E: Element>(
    grad_out: &[E],
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    d: &ConvDims,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> ConvGrads<E> {
    let ckk = d.c * d.kh * d.kw;
    let rows = d.n * d.oh * d.ow;
    // grad_out [n,f,oh,ow] regrouped as [rows, f]
    let mut g_mat = vec![E::ZERO; rows * d.f];
    for n in 0..d.n {
        for f in 0..d.f {
            for oh in 0..d.oh {
                for ow in 0..d.ow {
                    g_mat[((n * d.oh + oh) * d.ow + ow) * d.f + f] =
                        grad_out[idx4(d.f, d.oh, d.ow, n, f, oh, ow)];
                }
            }
        }
    }

    let input_grad = need_input.then(|| {
        let cols_grad = matmul(&g_mat, rows, d.f, kernel.data(), ckk);
        col2im_add(&cols_grad, d)
    });

    let kernel_grad = need_kernel.then(|| {
        let cols = im2col(input.data(), d);
        let g_t = transpose(&g_mat, rows, d.f);
        matmul(&g_t, d.f, rows, &cols, ckk)
    });

    let bias_grad = need_bias.then(|| {
        let mut gb = vec![E::ZERO; d.f];
        for r in 0..rows {
            for f in 0..d.f {
                gb[f] += g_mat[r * d.f + f];
            }
        }
        gb
    });

    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    }
}

pub(crate) fn maxpool2d_forward<E: Element>(
    input: &Tensor<E>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<E>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid(
            "maxpool2d",
            "window and stride must be positive",
        ));
    }
    if h < k || w < k || !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
        return Err(Error::invalid(
            "maxpool2d",
            format!(
                "extents {h}x{w} not divisible by window {k}/stride {stride} (no padding policy)"
            ),
        ));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let data = input.data();
    let mut out = vec![E::ZERO; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    // ties resolve to the first element in row-major window order
                    let mut best_idx = idx4(c, h, w, ni, ci, oi * stride, oj * stride);
                    let mut best = data[best_idx];
                    for ki in 0..k {
                        for kj in 0..k {
                            let idx = idx4(c, h, w, ni, ci, oi * stride + ki, oj * stride + kj);
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = idx4(c, oh, ow, ni, ci, oi, oj);
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, oh, ow], out).expect("maxpool output shape"),
        argmax,
    ))
}

pub(crate) fn maxpool2d_backward<E: Element>(
    grad_out: &[E],
    argmax: &[usize],
    input_len: usize,
) -> Vec<E> {
    let mut g = vec![E::ZERO; input_len];
    for (out_idx, &src) in argmax.iter().enumerate() {
        g[src] += grad_out[out_idx];
    }
    g
}

pub(crate) fn dense_check<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<(usize, usize, usize)> {
    let (n, d) = input.dims2("dense")?;
    let (wd, k) = weight.dims2("dense")?;
    if wd != d {
        return Err(Error::ShapeMismatch {
            op: "dense",
            axis: "inner",
            expected: d,
            got: wd,
        });
    }
    if bias.len() != k {
        return Err(Error::ShapeMismatch {
            op: "dense",
            axis: "bias",
            expected: k,
            got: bias.len(),
        });
    }
    Ok((n, d, k))
}

pub(crate) fn dense_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    n: usize,
    d: usize,
    k: usize,
) -> Tensor<E> {
    let mut out = matmul(input.data(), n, d, weight.data(), k);
    for row in out.chunks_exact_mut(k) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += *b;
        }
    }
    Tensor::from_vec(&[n, k], out).expect("dense output shape")
}

pub(crate) struct DenseGrads<E: Element> {
    pub input: Option<Vec<E>>,
    pub weight: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<E: Element>(
    grad_out: &[E],
    input: &Tensor<E>,
    weight: &Tensor<E>,
    n: usize,
    d: usize,
    k: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> DenseGrads<E> {
    let input_grad = need_input.then(|| {
        let w_t = transpose(weight.data(), d, k);
        matmul(grad_out, n, k, &w_t, d)
    });
    let weight_grad = need_weight.then(|| {
        let x_t = transpose(input.data(), n, d);
        matmul(&x_t, d, n, grad_out, k)
    });
    let bias_grad = need_bias.then(|| {
        let mut gb = vec![E::ZERO; k];
        for row in grad_out.chunks_exact(k) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += *v;
            }
        }
        gb
    });
    DenseGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

pub(crate) fn relu_forward<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let data = input.data().iter().map(|&v| v.maximum(E::ZERO)).collect();
    Tensor::from_vec(input.shape(), data).expect("relu shape")
}

/// Subgradient at exactly zero is zero.
pub(crate) fn relu_backward<E: Element>(grad_out: &[E], input: &[E]) -> Vec<E> {
    grad_out
        .iter()
        .zip(input)
        .map(|(&g, &x)| if x > E::ZERO { g } else { E::ZERO })
        .collect()
}

pub(crate) fn concat_check<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c1, h, w) = a.dims4("concat_channels")?;
    let (nb, c2, hb, wb) = b.dims4("concat_channels")?;
    if nb != n {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            axis: "batch",
            expected: n,
            got: nb,
        });
    }
    if hb != h {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            axis: "height",
            expected: h,
            got: hb,
        });
    }
    if wb != w {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            axis: "width",
            expected: w,
            got: wb,
        });
    }
    Ok((n, c1, c2, h, w))
}

pub(crate) fn concat_forward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    n: usize,
    c1: usize,
    c2: usize,
    h: usize,
    w: usize,
) -> Tensor<E> {
    let plane = h * w;
    let mut out = vec![E::ZERO; n * (c1 + c2) * plane];
    for ni in 0..n {
        let a_base = ni * c1 * plane;
        let b_base = ni * c2 * plane;
        let o_base = ni * (c1 + c2) * plane;
        out[o_base..o_base + c1 * plane].copy_from_slice(&a.data()[a_base..a_base + c1 * plane]);
        out[o_base + c1 * plane..o_base + (c1 + c2) * plane]
            .copy_from_slice(&b.data()[b_base..b_base + c2 * plane]);
    }
    Tensor::from_vec(&[n, c1 + c2, h, w], out).expect("concat shape")
}

pub(crate) fn concat_backward<E: Element>(
    grad_out: &[E],
    n: usize,
    c1: usize,
    c2: usize,
    plane: usize,
) -> (Vec<E>, Vec<E>) {
    let mut ga = vec![E::ZERO; n * c1 * plane];
    let mut gb = vec![E::ZERO; n * c2 * plane];
    for ni in 0..n {
        let o_base = ni * (c1 + c2) * plane;
        ga[ni * c1 * plane..(ni + 1) * c1 * plane]
            .copy_from_slice(&grad_out[o_base..o_base + c1 * plane]);
        gb[ni * c2 * plane..(ni + 1) * c2 * plane]
            .copy_from_slice(&grad_out[o_base + c1 * plane..o_base + (c1 + c2) * plane]);
    }
    (ga, gb)
}

pub(crate) fn global_avg_pool_forward<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let plane = h * w;
    let inv = E::ONE / E::from_f64(plane as f64);
    let mut out = vec![E::ZERO; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = E::ZERO;
            for v in &input.data()[base..base + plane] {
                acc += *v;
            }
            out[ni * c + ci] = acc * inv;
        }
    }
    Tensor::from_vec(&[n, c], out)
}

pub(crate) fn global_avg_pool_backward<E: Element>(
    grad_out: &[E],
    n: usize,
    c: usize,
    plane: usize,
) -> Vec<E> {
    let inv = E::ONE / E::from_f64(plane as f64);
    let mut g = vec![E::ZERO; n * c * plane];
    for (nc, &go) in grad_out.iter().enumerate() {
        let v = go * inv;
        for x in &mut g[nc * plane..(nc + 1) * plane] {
            *x = v;
        }
    }
    g
}

/// Inverted-dropout mask: `0` with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<E: Element>(len: usize, p: f64, rng: &mut PrngState) -> Vec<E> {
    let keep_scale = E::from_f64(1.0 / (1.0 - p));
    (0..len)
        .map(|_| {
            if rng.next_f64() < p {
                E::ZERO
            } else {
                keep_scale
            }
        })
        .collect()
}

/// Softmax over the spatial positions of every `[n, k]` map.
pub(crate) fn spatial_softmax_forward<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, k, h, w) = input.dims4("spatial_softmax")?;
    let plane = h * w;
    let mut out = vec![E::ZERO; input.len()];
    for map in 0..n * k {
        let base = map * plane;
        let src = &input.data()[base..base + plane];
        let mut max = src[0];
        for &v in src {
            max = max.maximum(v);
        }
        let mut sum = E::ZERO;
        for (o, &v) in out[base..base + plane].iter_mut().zip(src) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = E::ONE / sum;
        for o in &mut out[base..base + plane] {
            *o *= inv;
        }
    }
    Tensor::from_vec(input.shape(), out)
}

pub(crate) fn spatial_softmax_backward<E: Element>(
    grad_out: &[E],
    probs: &[E],
    plane: usize,
) -> Vec<E> {
    let mut g = vec![E::ZERO; grad_out.len()];
    for map in 0..grad_out.len() / plane {
        let base = map * plane;
        let mut dot = E::ZERO;
        for i in base..base + plane {
            dot += grad_out[i] * probs[i];
        }
        for i in base..base + plane {
            g[i] = probs[i] * (grad_out[i] - dot);
        }
    }
    g
}

pub(crate) fn sum_channels_forward<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, k, h, w) = input.dims4("sum_channels")?;
    let plane = h * w;
    let mut out = vec![E::ZERO; n * plane];
    for ni in 0..n {
        for ki in 0..k {
            let base = (ni * k + ki) * plane;
            for (o, &v) in out[ni * plane..(ni + 1) * plane]
                .iter_mut()
                .zip(&input.data()[base..base + plane])
            {
                *o += v;
            }
        }
    }
    Tensor::from_vec(&[n, 1, h, w], out)
}

pub(crate) fn sum_channels_backward<E: Element>(
    grad_out: &[E],
    n: usize,
    k: usize,
    plane: usize,
) -> Vec<E> {
    let mut g = vec![E::ZERO; n * k * plane];
    for ni in 0..n {
        for ki in 0..k {
            let base = (ni * k + ki) * plane;
            g[base..base + plane].copy_from_slice(&grad_out[ni * plane..(ni + 1) * plane]);
        }
    }
    g
}

pub(crate) fn mul_channel_broadcast_check<E: Element>(
    features: &Tensor<E>,
    alpha: &Tensor<E>,
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = features.dims4("mul_channel_broadcast")?;
    let (an, ac, ah, aw) = alpha.dims4("mul_channel_broadcast")?;
    if ac != 1 {
        return Err(Error::ShapeMismatch {
            op: "mul_channel_broadcast",
            axis: "channels",
            expected: 1,
            got: ac,
        });
    }
    if an != n || ah != h || aw != w {
        return Err(Error::ShapeMismatch {
            op: "mul_channel_broadcast",
            axis: "spatial",
            expected: n * h * w,
            got: an * ah * aw,
        });
    }
    Ok((n, c, h, w))
}

pub(crate) fn mul_channel_broadcast_forward<E: Element>(
    features: &Tensor<E>,
    alpha: &Tensor<E>,
    n: usize,
    c: usize,
    plane: usize,
) -> Tensor<E> {
    let mut out = vec![E::ZERO; features.len()];
    for ni in 0..n {
        let a = &alpha.data()[ni * plane..(ni + 1) * plane];
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for (o, (&f, &av)) in out[base..base + plane]
                .iter_mut()
                .zip(features.data()[base..base + plane].iter().zip(a))
            {
                *o = f * av;
            }
        }
    }
    Tensor::from_vec(features.shape(), out).expect("mul broadcast shape")
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn mul_channel_broadcast_backward<E: Element>(
    grad_out: &[E],
    features: &Tensor<E>,
    alpha: &Tensor<E>,
    n: usize,
    c: usize,
    plane: usize,
    need_features: bool,
    need_alpha: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let g_features = need_features.then(|| {
        let mut g = vec![E::ZERO; features.len()];
        for ni in 0..n {
            let a = &alpha.data()[ni * plane..(ni + 1) * plane];
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    g[base + i] = grad_out[base + i] * a[i];
                }
            }
        }
        g
    });
    let g_alpha = need_alpha.then(|| {
        let mut g = vec![E::ZERO; n * plane];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    g[ni * plane + i] += grad_out[base + i] * features.data()[base + i];
                }
            }
        }
        g
    });
    (g_features, g_alpha)
}

/// Border-replicating spatial pad: `[n,c,h,w] -> [n,c,h+2p,w+2p]`.
pub(crate) fn pad_replicate_forward<E: Element>(
    input: &Tensor<E>,
    pad: usize,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = input.dims4("pad_replicate")?;
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![E::ZERO; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                let ih = oi.saturating_sub(pad).min(h - 1);
                for oj in 0..ow {
                    let iw = oj.saturating_sub(pad).min(w - 1);
                    out[idx4(c, oh, ow, ni, ci, oi, oj)] =
                        input.data()[idx4(c, h, w, ni, ci, ih, iw)];
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub(crate) fn pad_replicate_backward<E: Element>(
    grad_out: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
) -> Vec<E> {
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut g = vec![E::ZERO; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                let ih = oi.saturating_sub(pad).min(h - 1);
                for oj in 0..ow {
                    let iw = oj.saturating_sub(pad).min(w - 1);
                    g[idx4(c, h, w, ni, ci, ih, iw)] += grad_out[idx4(c, oh, ow, ni, ci, oi, oj)];
                }
            }
        }
    }
    g
}

/// Per-row cross-entropy `logsumexp(z) - z[label]`, numerically stable.
pub(crate) fn per_row_ce<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<Vec<E>> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            axis: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    let mut out = Vec::with_capacity(n);
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                class_count: k,
            });
        }
        let mut max = row[0];
        for &v in row {
            max = max.maximum(v);
        }
        let mut sum = E::ZERO;
        for &v in row {
            sum += (v - max).exp();
        }
        out.push(sum.ln() - (row[y] - max));
    }
    Ok(out)
}

pub(crate) fn softmax_probs<E: Element>(logits: &[E], n: usize, k: usize) -> Vec<E> {
    let mut probs = vec![E::ZERO; n * k];
    for (i, row) in logits.chunks_exact(k).enumerate() {
        let mut max = row[0];
        for &v in row {
            max = max.maximum(v);
        }
        let mut sum = E::ZERO;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            let e = (v - max).exp();
            *p = e;
            sum += e;
        }
        let inv = E::ONE / sum;
        for p in &mut probs[i * k..(i + 1) * k] {
            *p *= inv;
        }
    }
    probs
}
