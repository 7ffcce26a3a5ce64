//! Temporal fusion: per-trajectory multi-head self-attention over the window
//! with a residual connection and a masked mean over time. Trajectories never
//! attend to each other.

use rand::Rng;

use crate::numerics::attention::{multi_head_attention, multi_head_attention_backward, MhaCtx};
use crate::numerics::{xavier_uniform, DenseArray, NumericsError, ParamBundle};

use super::time_encoding;

struct TrajCtx {
    traj: usize,
    mha: MhaCtx,
    valid: usize,
}

/// Forward context for [`mstr_backward`].
pub struct MstrCtx {
    per_traj: Vec<TrajCtx>,
    mask: Vec<bool>,
    shape: [usize; 3],
}

pub fn init_mstr_params<R: Rng>(params: &mut ParamBundle, prefix: &str, c: usize, rng: &mut R) {
    for name in ["wq", "wk", "wv", "wo"] {
        params.register(&format!("{prefix}.{name}"), xavier_uniform(&[c, c], c, c, rng), true);
    }
}

/// `seq` is `[R, C, n]` with frame 0 the oldest; `mask` is row-major
/// `[trajectory][frame]`. Fully-masked trajectories yield zero rows.
pub fn mstr(
    seq: &DenseArray,
    mask: &[bool],
    params: &ParamBundle,
    prefix: &str,
    heads: usize,
    use_te: bool,
) -> Result<(DenseArray, MstrCtx), NumericsError> {
    if seq.rank() != 3 {
        return Err(NumericsError::ShapeMismatch { expected: vec![0; 3], got: seq.shape().to_vec() });
    }
    let (r, c, n) = (seq.dim(0), seq.dim(1), seq.dim(2));
    if mask.len() != r * n {
        return Err(NumericsError::Invalid(format!(
            "mask length {} for {r} trajectories x {n} frames",
            mask.len()
        )));
    }
    let wq = params.value(&format!("{prefix}.wq"))?;
    let wk = params.value(&format!("{prefix}.wk"))?;
    let wv = params.value(&format!("{prefix}.wv"))?;
    let wo = params.value(&format!("{prefix}.wo"))?;

    let mut out = DenseArray::zeros(&[r, c]);
    let mut per_traj = Vec::new();
    for traj in 0..r {
        let kmask = &mask[traj * n..(traj + 1) * n];
        let valid = kmask.iter().filter(|&&m| m).count();
        if valid == 0 {
            continue;
        }
        // Tokens in [n, C] order, augmented with the age code (0 = newest).
        let mut x = DenseArray::zeros(&[n, c]);
        for t in 0..n {
            let te = if use_te {
                time_encoding((n - 1 - t) as f64, c)
            } else {
                vec![0.0; c]
            };
            for ch in 0..c {
                x.set2(t, ch, seq.at3(traj, ch, t) + te[ch]);
            }
        }
        let (y, mha) = multi_head_attention(&x, wq, wk, wv, wo, heads, Some(kmask))?;
        // Sum over valid slots first, divide once: keeps the degenerate
        // zero-attention case equal to a plain masked mean to the last bit.
        for ch in 0..c {
            let mut acc = 0.0;
            for t in 0..n {
                if kmask[t] {
                    acc += x.at2(t, ch) + y.at2(t, ch);
                }
            }
            out.set2(traj, ch, acc / valid as f64);
        }
        per_traj.push(TrajCtx { traj, mha, valid });
    }
    Ok((out, MstrCtx { per_traj, mask: mask.to_vec(), shape: [r, c, n] }))
}

/// `grad_out` is `[R, C]`. Returns the gradient w.r.t. `seq` (`[R, C, n]`,
/// exact zeros at masked slots) and accumulates attention weight gradients.
pub fn mstr_backward(
    ctx: &MstrCtx,
    grad_out: &DenseArray,
    params: &mut ParamBundle,
    prefix: &str,
) -> Result<DenseArray, NumericsError> {
    let [r, c, n] = ctx.shape;
    debug_assert_eq!(grad_out.shape(), [r, c]);
    let wq = params.value(&format!("{prefix}.wq"))?;
    let wk = params.value(&format!("{prefix}.wk"))?;
    let wv = params.value(&format!("{prefix}.wv"))?;
    let wo = params.value(&format!("{prefix}.wo"))?;

    let mut g_seq = DenseArray::zeros(&[r, c, n]);
    let mut gwq = DenseArray::zeros(&[c, c]);
    let mut gwk = DenseArray::zeros(&[c, c]);
    let mut gwv = DenseArray::zeros(&[c, c]);
    let mut gwo = DenseArray::zeros(&[c, c]);
    for tc in &ctx.per_traj {
        let traj = tc.traj;
        let kmask = &ctx.mask[traj * n..(traj + 1) * n];
        // Mean over valid frames: each valid token gets grad_row / valid.
        let mut g_y = DenseArray::zeros(&[n, c]);
        for t in 0..n {
            if !kmask[t] {
                continue;
            }
            for ch in 0..c {
                g_y.set2(t, ch, grad_out.at2(traj, ch) / tc.valid as f64);
            }
        }
        let g_attn_in =
            multi_head_attention_backward(&tc.mha, wq, wk, wv, wo, &g_y, &mut gwq, &mut gwk, &mut gwv, &mut gwo);
        // Residual: dL/dx = dL/dy (direct) + attention path; the time code is
        // an additive constant so dx passes straight to the input sequence.
        for t in 0..n {
            for ch in 0..c {
                let g = g_y.at2(t, ch) + g_attn_in.at2(t, ch);
                if g != 0.0 {
                    let i = g_seq.idx3(traj, ch, t);
                    g_seq.data_mut()[i] = g;
                }
            }
        }
    }
    params.accumulate(&format!("{prefix}.wq"), &gwq)?;
    params.accumulate(&format!("{prefix}.wk"), &gwk)?;
    params.accumulate(&format!("{prefix}.wv"), &gwv)?;
    params.accumulate(&format!("{prefix}.wo"), &gwo)?;
    Ok(g_seq)
}
