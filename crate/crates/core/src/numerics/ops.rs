//! Differentiable kernels. Each op returns its output together with a
//! context holding whatever the hand-written backward pass needs.

use rayon::prelude::*;

use super::{DenseArray, NumericsError};

// ---------------------------------------------------------------- linear

pub struct LinearCtx {
    x: DenseArray,
}

fn as_rows(x: &DenseArray) -> Result<(usize, usize), NumericsError> {
    match x.shape() {
        [k] => Ok((1, *k)),
        [n, k] => Ok((*n, *k)),
        other => Err(NumericsError::ShapeMismatch { expected: vec![0, 0], got: other.to_vec() }),
    }
}

/// y = x W + b with x: [n, in] (or [in]), W: [in, out], b: [out].
pub fn linear(
    x: &DenseArray,
    w: &DenseArray,
    b: Option<&DenseArray>,
) -> Result<(DenseArray, LinearCtx), NumericsError> {
    let (n, k) = as_rows(x)?;
    if w.rank() != 2 || w.dim(0) != k {
        return Err(NumericsError::ShapeMismatch { expected: vec![k, 0], got: w.shape().to_vec() });
    }
    let out = w.dim(1);
    if let Some(b) = b {
        if b.shape() != [out] {
            return Err(NumericsError::ShapeMismatch { expected: vec![out], got: b.shape().to_vec() });
        }
    }
    let mut y = DenseArray::zeros(&[n, out]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for i in 0..n {
        let row = &xd[i * k..(i + 1) * k];
        let dst = &mut yd[i * out..(i + 1) * out];
        if let Some(b) = b {
            dst.copy_from_slice(b.data());
        }
        for (kk, &xv) in row.iter().enumerate() {
            let wrow = &wd[kk * out..(kk + 1) * out];
            for o in 0..out {
                dst[o] += xv * wrow[o];
            }
        }
    }
    let y = if x.rank() == 1 { DenseArray::from_vec(&[out], y.data().to_vec()) } else { y };
    Ok((y, LinearCtx { x: x.clone() }))
}

/// Returns grad_x; accumulates into grad_w and grad_b.
pub fn linear_backward(
    ctx: &LinearCtx,
    w: &DenseArray,
    grad_y: &DenseArray,
    grad_w: &mut DenseArray,
    mut grad_b: Option<&mut DenseArray>,
) -> DenseArray {
    let (n, k) = as_rows(&ctx.x).expect("ctx shape");
    let out = w.dim(1);
    let xd = ctx.x.data();
    let wd = w.data();
    let gd = grad_y.data();
    debug_assert_eq!(gd.len(), n * out);
    let mut gx = vec![0.0; n * k];
    let gw = grad_w.data_mut();
    for i in 0..n {
        let grow = &gd[i * out..(i + 1) * out];
        let xrow = &xd[i * k..(i + 1) * k];
        let gxrow = &mut gx[i * k..(i + 1) * k];
        for kk in 0..k {
            let wrow = &wd[kk * out..(kk + 1) * out];
            let mut acc = 0.0;
            for o in 0..out {
                acc += grow[o] * wrow[o];
            }
            gxrow[kk] += acc;
            let gwrow = &mut gw[kk * out..(kk + 1) * out];
            let xv = xrow[kk];
            for o in 0..out {
                gwrow[o] += xv * grow[o];
            }
        }
        if let Some(gb) = grad_b.as_deref_mut() {
            let gbd = gb.data_mut();
            for o in 0..out {
                gbd[o] += grow[o];
            }
        }
    }
    if ctx.x.rank() == 1 {
        DenseArray::from_vec(&[k], gx)
    } else {
        DenseArray::from_vec(&[n, k], gx)
    }
}

// --------------------------------------------------------------- softmax

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &DenseArray, axis: usize) -> Result<DenseArray, NumericsError> {
    if axis >= x.rank() {
        return Err(NumericsError::BadAxis { axis, rank: x.rank() });
    }
    let n = x.dim(axis);
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut y = x.clone();
    let d = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(d[base + k * inner]);
            }
            let mut sum = 0.0;
            for k in 0..n {
                let e = (d[base + k * inner] - m).exp();
                d[base + k * inner] = e;
                sum += e;
            }
            for k in 0..n {
                d[base + k * inner] /= sum;
            }
        }
    }
    Ok(y)
}

/// grad_x from the softmax output `y` and upstream grad along the same axis.
pub fn softmax_backward(y: &DenseArray, grad_y: &DenseArray, axis: usize) -> DenseArray {
    let n = y.dim(axis);
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let outer: usize = y.shape()[..axis].iter().product();
    let mut gx = DenseArray::zeros(y.shape());
    let yd = y.data();
    let gd = grad_y.data();
    let out = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = 0.0;
            for k in 0..n {
                dot += gd[base + k * inner] * yd[base + k * inner];
            }
            for k in 0..n {
                let idx = base + k * inner;
                out[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    gx
}

// ------------------------------------------------------------- bilinear

/// Samples all channels of a [C, H, W] map at continuous (fx, fy), where fx
/// runs along W and fy along H. Integer coordinates hit grid values exactly;
/// out-of-bounds neighbors contribute zero.
pub fn bilinear_sample(map: &DenseArray, fx: f64, fy: f64) -> Vec<f64> {
    let (c, h, w) = (map.dim(0), map.dim(1), map.dim(2));
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let d = map.data();
    let fetch = |ch: usize, yy: i64, xx: i64| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            d[(ch * h + yy as usize) * w + xx as usize]
        }
    };
    let mut out = vec![0.0; c];
    for (ch, o) in out.iter_mut().enumerate() {
        let v00 = fetch(ch, y0, x0);
        let v01 = fetch(ch, y0, x0 + 1);
        let v10 = fetch(ch, y0 + 1, x0);
        let v11 = fetch(ch, y0 + 1, x0 + 1);
        *o = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
    }
    out
}

/// Backward of `bilinear_sample`: returns (d/dfx, d/dfy) and optionally
/// scatters the map gradient.
pub fn bilinear_sample_backward(
    map: &DenseArray,
    fx: f64,
    fy: f64,
    grad: &[f64],
    mut grad_map: Option<&mut DenseArray>,
) -> (f64, f64) {
    let (c, h, w) = (map.dim(0), map.dim(1), map.dim(2));
    debug_assert_eq!(grad.len(), c);
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let d = map.data();
    let inb = |yy: i64, xx: i64| yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64;
    let fetch = |ch: usize, yy: i64, xx: i64| -> f64 {
        if inb(yy, xx) {
            d[(ch * h + yy as usize) * w + xx as usize]
        } else {
            0.0
        }
    };
    let mut dfx = 0.0;
    let mut dfy = 0.0;
    for (ch, &g) in grad.iter().enumerate() {
        let v00 = fetch(ch, y0, x0);
        let v01 = fetch(ch, y0, x0 + 1);
        let v10 = fetch(ch, y0 + 1, x0);
        let v11 = fetch(ch, y0 + 1, x0 + 1);
        dfx += g * ((1.0 - ty) * (v01 - v00) + ty * (v11 - v10));
        dfy += g * ((1.0 - tx) * (v10 - v00) + tx * (v11 - v01));
        if let Some(gm) = grad_map.as_deref_mut() {
            let gmd = gm.data_mut();
            let mut put = |yy: i64, xx: i64, wgt: f64| {
                if inb(yy, xx) {
                    gmd[(ch * h + yy as usize) * w + xx as usize] += wgt * g;
                }
            };
            put(y0, x0, (1.0 - ty) * (1.0 - tx));
            put(y0, x0 + 1, (1.0 - ty) * tx);
            put(y0 + 1, x0, ty * (1.0 - tx));
            put(y0 + 1, x0 + 1, ty * tx);
        }
    }
    (dfx, dfy)
}

// ---------------------------------------------------------------- conv2d

pub struct Conv2dCtx {
    x: DenseArray,
}

/// Same-padded stride-1 convolution: x [Cin, H, W], w [Cout, Cin, kh, kw]
/// with odd kernel sides, b [Cout], y [Cout, H, W].
pub fn conv2d(
    x: &DenseArray,
    w: &DenseArray,
    b: &DenseArray,
) -> Result<(DenseArray, Conv2dCtx), NumericsError> {
    if x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) {
        return Err(NumericsError::ShapeMismatch {
            expected: vec![w.dim(1), 0, 0],
            got: x.shape().to_vec(),
        });
    }
    let (cin, h, wid) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    if b.shape() != [cout] || kh % 2 == 0 || kw % 2 == 0 {
        return Err(NumericsError::Invalid("conv2d needs odd kernel and [Cout] bias".into()));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();
    let wd = w.data();
    let mut y = DenseArray::zeros(&[cout, h, wid]);
    y.data_mut()
        .par_chunks_mut(h * wid)
        .enumerate()
        .for_each(|(co, plane)| {
            plane.fill(b.data()[co]);
            for ci in 0..cin {
                let xplane = &xd[ci * h * wid..(ci + 1) * wid * h];
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = wd[((co * cin + ci) * kh + u) * kw + v];
                        if wv == 0.0 {
                            continue;
                        }
                        let i0 = ph.saturating_sub(u);
                        let i1 = (h + ph).saturating_sub(u).min(h);
                        let j0 = pw.saturating_sub(v);
                        let j1 = (wid + pw).saturating_sub(v).min(wid);
                        for i in i0..i1 {
                            let src = &xplane[(i + u - ph) * wid..(i + u - ph + 1) * wid];
                            let dst = &mut plane[i * wid..(i + 1) * wid];
                            for j in j0..j1 {
                                dst[j] += wv * src[j + v - pw];
                            }
                        }
                    }
                }
            }
        });
    Ok((y, Conv2dCtx { x: x.clone() }))
}

/// Returns grad_x; accumulates into grad_w and grad_b.
pub fn conv2d_backward(
    ctx: &Conv2dCtx,
    w: &DenseArray,
    grad_y: &DenseArray,
    grad_w: &mut DenseArray,
    grad_b: &mut DenseArray,
) -> DenseArray {
    let x = &ctx.x;
    let (cin, h, wid) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();
    let wd = w.data();
    let gd = grad_y.data();

    {
        let gbd = grad_b.data_mut();
        for co in 0..cout {
            gbd[co] += gd[co * h * wid..(co + 1) * h * wid].iter().sum::<f64>();
        }
    }

    grad_w
        .data_mut()
        .par_chunks_mut(cin * kh * kw)
        .enumerate()
        .for_each(|(co, gwslice)| {
            let gplane = &gd[co * h * wid..(co + 1) * h * wid];
            for ci in 0..cin {
                let xplane = &xd[ci * h * wid..(ci + 1) * h * wid];
                for u in 0..kh {
                    for v in 0..kw {
                        let i0 = ph.saturating_sub(u);
                        let i1 = (h + ph).saturating_sub(u).min(h);
                        let j0 = pw.saturating_sub(v);
                        let j1 = (wid + pw).saturating_sub(v).min(wid);
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let src = &xplane[(i + u - ph) * wid..(i + u - ph + 1) * wid];
                            let grow = &gplane[i * wid..(i + 1) * wid];
                            for j in j0..j1 {
                                acc += grow[j] * src[j + v - pw];
                            }
                        }
                        gwslice[(ci * kh + u) * kw + v] += acc;
                    }
                }
            }
        });

    let mut gx = DenseArray::zeros(&[cin, h, wid]);
    gx.data_mut()
        .par_chunks_mut(h * wid)
        .enumerate()
        .for_each(|(ci, plane)| {
            for co in 0..cout {
                let gplane = &gd[co * h * wid..(co + 1) * h * wid];
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = wd[((co * cin + ci) * kh + u) * kw + v];
                        if wv == 0.0 {
                            continue;
                        }
                        let i0 = ph.saturating_sub(u);
                        let i1 = (h + ph).saturating_sub(u).min(h);
                        let j0 = pw.saturating_sub(v);
                        let j1 = (wid + pw).saturating_sub(v).min(wid);
                        for i in i0..i1 {
                            let grow = &gplane[i * wid..(i + 1) * wid];
                            let dst = &mut plane[(i + u - ph) * wid..(i + u - ph + 1) * wid];
                            for j in j0..j1 {
                                dst[j + v - pw] += wv * grow[j];
                            }
                        }
                    }
                }
            }
        });
    gx
}

// ------------------------------------------------------------- batchnorm

pub struct BatchNormCtx {
    xhat: DenseArray,
    inv_std: Vec<f64>,
}

/// Training-mode batch normalization over the spatial dims of [C, H, W].
/// Updates running statistics in place with the given momentum.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train(
    x: &DenseArray,
    gamma: &DenseArray,
    beta: &DenseArray,
    running_mean: &mut DenseArray,
    running_var: &mut DenseArray,
    momentum: f64,
    eps: f64,
) -> (DenseArray, BatchNormCtx) {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let n = (h * w) as f64;
    let xd = x.data();
    let mut y = DenseArray::zeros(x.shape());
    let mut xhat = DenseArray::zeros(x.shape());
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let yh = &mut xhat.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (i, v) in plane.iter().enumerate() {
            yh[i] = (v - mean) * istd;
        }
        let yd = &mut y.data_mut()[ch * h * w..(ch + 1) * h * w];
        let xh = &xhat.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h * w {
            yd[i] = g * xh[i] + b;
        }
        running_mean.data_mut()[ch] = momentum * running_mean.data()[ch] + (1.0 - momentum) * mean;
        running_var.data_mut()[ch] = momentum * running_var.data()[ch] + (1.0 - momentum) * var;
    }
    (y, BatchNormCtx { xhat, inv_std })
}

/// Inference-mode batch normalization using running statistics.
pub fn batchnorm_infer(
    x: &DenseArray,
    gamma: &DenseArray,
    beta: &DenseArray,
    running_mean: &DenseArray,
    running_var: &DenseArray,
    eps: f64,
) -> DenseArray {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let mut y = DenseArray::zeros(x.shape());
    for ch in 0..c {
        let istd = 1.0 / (running_var.data()[ch] + eps).sqrt();
        let m = running_mean.data()[ch];
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut y.data_mut()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h * w {
            dst[i] = g * (src[i] - m) * istd + b;
        }
    }
    y
}

/// Backward through training-mode batch statistics. Returns grad_x;
/// accumulates into grad_gamma/grad_beta.
pub fn batchnorm_backward(
    ctx: &BatchNormCtx,
    gamma: &DenseArray,
    grad_y: &DenseArray,
    grad_gamma: &mut DenseArray,
    grad_beta: &mut DenseArray,
) -> DenseArray {
    let (c, h, w) = (ctx.xhat.dim(0), ctx.xhat.dim(1), ctx.xhat.dim(2));
    let n = (h * w) as f64;
    let mut gx = DenseArray::zeros(ctx.xhat.shape());
    for ch in 0..c {
        let xh = &ctx.xhat.data()[ch * h * w..(ch + 1) * h * w];
        let gy = &grad_y.data()[ch * h * w..(ch + 1) * h * w];
        let sum_g: f64 = gy.iter().sum();
        let sum_gx: f64 = gy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        grad_beta.data_mut()[ch] += sum_g;
        grad_gamma.data_mut()[ch] += sum_gx;
        let scale = gamma.data()[ch] * ctx.inv_std[ch] / n;
        let dst = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h * w {
            dst[i] = scale * (n * gy[i] - sum_g - xh[i] * sum_gx);
        }
    }
    gx
}

// ------------------------------------------------------------------ relu

/// Elementwise max(0, x).
pub fn relu(x: &DenseArray) -> DenseArray {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// grad_x from the relu output (y > 0 iff x > 0).
pub fn relu_backward(y: &DenseArray, grad_y: &DenseArray) -> DenseArray {
    let mut gx = grad_y.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}
