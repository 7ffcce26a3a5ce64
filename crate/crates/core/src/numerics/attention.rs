//! Multi-head self-attention over a token sequence, with an explicit
//! backward pass. Projections are bias-free square maps [C, C].

use super::ops::{softmax, softmax_backward};
use super::{DenseArray, NumericsError};

pub struct MhaCtx {
    x: DenseArray,
    q: DenseArray,
    k: DenseArray,
    v: DenseArray,
    concat: DenseArray,
    attn: Vec<DenseArray>,
    heads: usize,
}

fn matmul_acc(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, out: &mut [f64]) {
    // out[n, m] += a[n, k] * b[k, m]
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn project(x: &DenseArray, w: &DenseArray) -> DenseArray {
    let (n, c) = (x.dim(0), x.dim(1));
    let mut y = DenseArray::zeros(&[n, c]);
    matmul_acc(x.data(), n, c, w.data(), c, y.data_mut());
    y
}

/// x: [n, C] tokens. `key_mask[j] == false` removes token j from every
/// softmax; at least one key must stay valid.
pub fn multi_head_attention(
    x: &DenseArray,
    wq: &DenseArray,
    wk: &DenseArray,
    wv: &DenseArray,
    wo: &DenseArray,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(DenseArray, MhaCtx), NumericsError> {
    if x.rank() != 2 {
        return Err(NumericsError::ShapeMismatch { expected: vec![0, 0], got: x.shape().to_vec() });
    }
    let (n, c) = (x.dim(0), x.dim(1));
    for w in [wq, wk, wv, wo] {
        if w.shape() != [c, c] {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![c, c],
                got: w.shape().to_vec(),
            });
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(NumericsError::Invalid(format!("{heads} heads do not divide {c} channels")));
    }
    if let Some(m) = key_mask {
        if m.len() != n {
            return Err(NumericsError::Invalid("key mask length mismatch".into()));
        }
        if !m.iter().any(|&v| v) {
            return Err(NumericsError::Invalid("attention needs at least one valid key".into()));
        }
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = project(x, wq);
    let k = project(x, wk);
    let v = project(x, wv);
    let mut concat = DenseArray::zeros(&[n, c]);
    let mut attn = Vec::with_capacity(heads);
    for hindex in 0..heads {
        let off = hindex * dh;
        let mut scores = DenseArray::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let masked = key_mask.map(|m| !m[j]).unwrap_or(false);
                if masked {
                    scores.set2(i, j, f64::NEG_INFINITY);
                    continue;
                }
                let mut dot = 0.0;
                for t in 0..dh {
                    dot += q.at2(i, off + t) * k.at2(j, off + t);
                }
                scores.set2(i, j, dot * scale);
            }
        }
        let a = softmax(&scores, 1)?;
        for i in 0..n {
            for t in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += a.at2(i, j) * v.at2(j, off + t);
                }
                concat.set2(i, off + t, acc);
            }
        }
        attn.push(a);
    }
    let y = project(&concat, wo);
    let ctx = MhaCtx { x: x.clone(), q, k, v, concat, attn, heads };
    Ok((y, ctx))
}

/// Returns grad_x; accumulates projection gradients.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention_backward(
    ctx: &MhaCtx,
    wq: &DenseArray,
    wk: &DenseArray,
    wv: &DenseArray,
    wo: &DenseArray,
    grad_y: &DenseArray,
    grad_wq: &mut DenseArray,
    grad_wk: &mut DenseArray,
    grad_wv: &mut DenseArray,
    grad_wo: &mut DenseArray,
) -> DenseArray {
    let (n, c) = (ctx.x.dim(0), ctx.x.dim(1));
    let heads = ctx.heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // y = concat * Wo
    let mut g_concat = DenseArray::zeros(&[n, c]);
    for i in 0..n {
        for t in 0..c {
            let mut acc = 0.0;
            for j in 0..c {
                acc += grad_y.at2(i, j) * wo.at2(t, j);
            }
            g_concat.set2(i, t, acc);
        }
    }
    {
        let gwo = grad_wo.data_mut();
        for t in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += ctx.concat.at2(i, t) * grad_y.at2(i, j);
                }
                gwo[t * c + j] += acc;
            }
        }
    }

    let mut g_q = DenseArray::zeros(&[n, c]);
    let mut g_k = DenseArray::zeros(&[n, c]);
    let mut g_v = DenseArray::zeros(&[n, c]);
    for hindex in 0..heads {
        let off = hindex * dh;
        let a = &ctx.attn[hindex];
        // concat_h = A * V_h
        let mut g_a = DenseArray::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += g_concat.at2(i, off + t) * ctx.v.at2(j, off + t);
                }
                g_a.set2(i, j, acc);
            }
        }
        for j in 0..n {
            for t in 0..dh {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += a.at2(i, j) * g_concat.at2(i, off + t);
                }
                let idx = g_v.idx2(j, off + t);
                g_v.data_mut()[idx] += acc;
            }
        }
        // scores = scale * Q_h K_h^T; masked entries have a == 0 and the
        // softmax backward keeps their gradient at zero.
        let g_scores = softmax_backward(a, &g_a, 1);
        for i in 0..n {
            for j in 0..n {
                let gs = g_scores.at2(i, j) * scale;
                if gs == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    let qi = g_q.idx2(i, off + t);
                    g_q.data_mut()[qi] += gs * ctx.k.at2(j, off + t);
                    let ki = g_k.idx2(j, off + t);
                    g_k.data_mut()[ki] += gs * ctx.q.at2(i, off + t);
                }
            }
        }
    }

    // Q = X Wq etc.: accumulate weight grads, collect input grad.
    let mut gx = DenseArray::zeros(&[n, c]);
    for (gproj, w, gw) in [
        (&g_q, wq, grad_wq),
        (&g_k, wk, grad_wk),
        (&g_v, wv, grad_wv),
    ] {
        let gwd = gw.data_mut();
        for t in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += ctx.x.at2(i, t) * gproj.at2(i, j);
                }
                gwd[t * c + j] += acc;
            }
        }
        for i in 0..n {
            for t in 0..c {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += gproj.at2(i, j) * w.at2(t, j);
                }
                let idx = gx.idx2(i, t);
                gx.data_mut()[idx] += acc;
            }
        }
    }
    gx
}
