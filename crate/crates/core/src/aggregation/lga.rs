//! Local-branch aggregation: deformable attention from a global-map query
//! into a cropped patch of the 2x-resolution local map.
//!
//! The query is the global feature column at the trajectory's reference
//! cell. Per head, linear layers predict sampling offsets and attention
//! logits from the query alone; samples are taken bilinearly from the patch,
//! projected down (`val`), attention-pooled, projected back up (`out`), and
//! the head sum is mapped to global width by a final linear layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureMap;
use crate::geometry::BevIndex;
use crate::numerics::ops::{bilinear_sample, bilinear_sample_backward, softmax, softmax_backward};
use crate::numerics::{xavier_uniform, DenseArray, NumericsError, ParamBundle};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LgaConfig {
    /// Attention heads; must divide the local channel count.
    pub heads: usize,
    /// Sampling points per head.
    pub points: usize,
    /// Patch half-width in global cells; the crop is 2*expand local cells.
    pub expand: usize,
}

impl Default for LgaConfig {
    fn default() -> Self {
        Self { heads: 4, points: 4, expand: 2 }
    }
}

struct HeadCtx {
    attn: DenseArray,
    positions: Vec<(f64, f64)>,
    samples: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pooled: Vec<f64>,
}

/// Forward context for [`lga_backward`].
pub struct LgaCtx {
    query: DenseArray,
    patch: DenseArray,
    heads: Vec<HeadCtx>,
    pre_proj: DenseArray,
    cfg: LgaConfig,
}

/// Offset and logit predictors start at zero so untrained attention samples
/// the patch center with uniform weights; value/output maps get fan-scaled
/// random initialization.
pub fn init_lga_params<R: Rng>(
    params: &mut ParamBundle,
    prefix: &str,
    c_g: usize,
    c_l: usize,
    cfg: &LgaConfig,
    rng: &mut R,
) {
    assert!(cfg.heads > 0 && c_l.is_multiple_of(cfg.heads), "{} heads must divide {c_l}", cfg.heads);
    let dv = c_l / cfg.heads;
    for h in 0..cfg.heads {
        params.register(&format!("{prefix}.h{h}.off.w"), DenseArray::zeros(&[c_g, 2 * cfg.points]), true);
        params.register(&format!("{prefix}.h{h}.off.b"), DenseArray::zeros(&[2 * cfg.points]), true);
        params.register(&format!("{prefix}.h{h}.att.w"), DenseArray::zeros(&[c_g, cfg.points]), true);
        params.register(&format!("{prefix}.h{h}.att.b"), DenseArray::zeros(&[cfg.points]), true);
        params.register(&format!("{prefix}.h{h}.val.w"), xavier_uniform(&[c_l, dv], c_l, dv, rng), true);
        params.register(&format!("{prefix}.h{h}.out.w"), xavier_uniform(&[dv, c_l], dv, c_l, rng), true);
    }
    params.register(&format!("{prefix}.proj.w"), xavier_uniform(&[c_l, c_g], c_l, c_g, rng), true);
    params.register(&format!("{prefix}.proj.b"), DenseArray::zeros(&[c_g]), true);
}

fn matvec(x: &[f64], w: &DenseArray, b: Option<&DenseArray>) -> Vec<f64> {
    let (k, m) = (w.dim(0), w.dim(1));
    debug_assert_eq!(x.len(), k);
    let mut y = match b {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; m],
    };
    let wd = w.data();
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (j, yv) in y.iter_mut().enumerate() {
            *yv += xv * wd[i * m + j];
        }
    }
    y
}

/// Run one (trajectory, frame) slot. `reference` must be in range on the
/// global grid; the local map must be exactly twice the global resolution.
pub fn lga_frame(
    local: &FeatureMap,
    global: &FeatureMap,
    reference: &BevIndex,
    cfg: &LgaConfig,
    params: &ParamBundle,
    prefix: &str,
) -> Result<(Vec<f64>, LgaCtx), NumericsError> {
    if !reference.in_range {
        return Err(NumericsError::Invalid("reference point off the global grid".into()));
    }
    if local.grid.width != 2 * global.grid.width || local.grid.height != 2 * global.grid.height {
        return Err(NumericsError::Invalid(format!(
            "local grid {}x{} is not twice the global {}x{}",
            local.grid.width, local.grid.height, global.grid.width, global.grid.height
        )));
    }
    let (c_g, c_l) = (global.channels(), local.channels());
    if cfg.heads == 0 || c_l % cfg.heads != 0 {
        return Err(NumericsError::Invalid(format!(
            "{} heads do not divide {c_l} local channels",
            cfg.heads
        )));
    }
    let k = cfg.expand as i64;
    if k < 1 {
        return Err(NumericsError::Invalid("expansion factor must be >= 1".into()));
    }

    let query =
        DenseArray::from_vec(&[c_g], global.column(reference.iy as usize, reference.ix as usize));

    // Crop a 2K x 2K patch of the local map around the reference; local
    // fractional coordinates are exactly twice the global ones.
    let (lfx, lfy) = (2.0 * reference.fx, 2.0 * reference.fy);
    let (x0, y0) = (lfx.floor() as i64 - (k - 1), lfy.floor() as i64 - (k - 1));
    let side = 2 * cfg.expand;
    let mut patch = DenseArray::zeros(&[c_l, side, side]);
    for c in 0..c_l {
        for py in 0..side {
            let sy = y0 + py as i64;
            if sy < 0 || sy >= local.grid.height as i64 {
                continue;
            }
            for px in 0..side {
                let sx = x0 + px as i64;
                if sx < 0 || sx >= local.grid.width as i64 {
                    continue;
                }
                patch.set3(c, py, px, local.at(c, sy as usize, sx as usize));
            }
        }
    }
    // Patch sampling coordinates of the reference itself (cell centers sit
    // on integers for the bilinear kernel).
    let base = (lfx - 0.5 - x0 as f64, lfy - 0.5 - y0 as f64);

    let mut pre_proj = DenseArray::zeros(&[c_l]);
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let off_w = params.value(&format!("{prefix}.h{h}.off.w"))?;
        let off_b = params.value(&format!("{prefix}.h{h}.off.b"))?;
        let att_w = params.value(&format!("{prefix}.h{h}.att.w"))?;
        let att_b = params.value(&format!("{prefix}.h{h}.att.b"))?;
        let val_w = params.value(&format!("{prefix}.h{h}.val.w"))?;
        let out_w = params.value(&format!("{prefix}.h{h}.out.w"))?;
        let dv = val_w.dim(1);

        let offsets = matvec(query.data(), off_w, Some(off_b));
        let logits = matvec(query.data(), att_w, Some(att_b));
        let attn = softmax(&DenseArray::from_vec(&[cfg.points], logits), 0)?;

        let mut positions = Vec::with_capacity(cfg.points);
        let mut samples = Vec::with_capacity(cfg.points);
        let mut values = Vec::with_capacity(cfg.points);
        let mut pooled = vec![0.0; dv];
        for j in 0..cfg.points {
            let pos = (base.0 + offsets[2 * j], base.1 + offsets[2 * j + 1]);
            let s = bilinear_sample(&patch, pos.0, pos.1);
            let v = matvec(&s, val_w, None);
            let a = attn.data()[j];
            for (p, &vv) in pooled.iter_mut().zip(&v) {
                *p += a * vv;
            }
            positions.push(pos);
            samples.push(s);
            values.push(v);
        }
        let head_out = matvec(&pooled, out_w, None);
        for (acc, &v) in pre_proj.data_mut().iter_mut().zip(&head_out) {
            *acc += v;
        }
        heads.push(HeadCtx { attn, positions, samples, values, pooled });
    }

    let proj_w = params.value(&format!("{prefix}.proj.w"))?;
    let proj_b = params.value(&format!("{prefix}.proj.b"))?;
    let out = matvec(pre_proj.data(), proj_w, Some(proj_b));
    Ok((out, LgaCtx { query, patch, heads, pre_proj, cfg: *cfg }))
}

/// `grad` is dL/d(output). Accumulates every layer's gradient into `params`;
/// offset gradients flow through the bilinear sampling positions.
pub fn lga_backward(
    ctx: &LgaCtx,
    grad: &[f64],
    params: &mut ParamBundle,
    prefix: &str,
) -> Result<(), NumericsError> {
    let cfg = ctx.cfg;
    let c_l = ctx.pre_proj.len();
    let c_g = ctx.query.len();

    let proj_w = params.value(&format!("{prefix}.proj.w"))?;
    let mut g_proj_w = DenseArray::zeros(&[c_l, c_g]);
    let mut g_pre = vec![0.0; c_l];
    {
        let (pd, wd, gw) = (ctx.pre_proj.data(), proj_w.data(), g_proj_w.data_mut());
        for i in 0..c_l {
            for j in 0..c_g {
                gw[i * c_g + j] = pd[i] * grad[j];
                g_pre[i] += grad[j] * wd[i * c_g + j];
            }
        }
    }

    struct HeadGrads {
        off_w: DenseArray,
        off_b: DenseArray,
        att_w: DenseArray,
        att_b: DenseArray,
        val_w: DenseArray,
        out_w: DenseArray,
    }
    let mut acc = Vec::with_capacity(cfg.heads);
    for (h, hc) in ctx.heads.iter().enumerate() {
        let val_w = params.value(&format!("{prefix}.h{h}.val.w"))?;
        let out_w = params.value(&format!("{prefix}.h{h}.out.w"))?;
        let dv = val_w.dim(1);

        // head_out = pooled * out_w; every head receives the same g_pre.
        let mut g_out_w = DenseArray::zeros(&[dv, c_l]);
        let mut g_pooled = vec![0.0; dv];
        {
            let (od, gw) = (out_w.data(), g_out_w.data_mut());
            for i in 0..dv {
                for j in 0..c_l {
                    gw[i * c_l + j] = hc.pooled[i] * g_pre[j];
                    g_pooled[i] += g_pre[j] * od[i * c_l + j];
                }
            }
        }

        // pooled = sum_j attn_j * values_j.
        let mut g_attn = DenseArray::zeros(&[cfg.points]);
        let mut g_val_w = DenseArray::zeros(&[c_l, dv]);
        let mut g_off = vec![0.0; 2 * cfg.points];
        for j in 0..cfg.points {
            let a = hc.attn.data()[j];
            g_attn.data_mut()[j] =
                hc.values[j].iter().zip(&g_pooled).map(|(v, g)| v * g).sum();
            let g_v: Vec<f64> = g_pooled.iter().map(|g| a * g).collect();
            // values_j = samples_j * val_w.
            let mut g_sample = vec![0.0; c_l];
            {
                let (vd, gw) = (val_w.data(), g_val_w.data_mut());
                for i in 0..c_l {
                    for t in 0..dv {
                        gw[i * dv + t] += hc.samples[j][i] * g_v[t];
                        g_sample[i] += g_v[t] * vd[i * dv + t];
                    }
                }
            }
            let (px, py) = hc.positions[j];
            let (dpx, dpy) = bilinear_sample_backward(&ctx.patch, px, py, &g_sample, None);
            g_off[2 * j] = dpx;
            g_off[2 * j + 1] = dpy;
        }
        let g_logits = softmax_backward(&hc.attn, &g_attn, 0);

        // Offset and logit layers share the query input.
        let mut g_off_w = DenseArray::zeros(&[c_g, 2 * cfg.points]);
        let mut g_att_w = DenseArray::zeros(&[c_g, cfg.points]);
        {
            let qd = ctx.query.data();
            let (gow, gaw) = (g_off_w.data_mut(), g_att_w.data_mut());
            for (i, &qv) in qd.iter().enumerate() {
                for (j, &g) in g_off.iter().enumerate() {
                    gow[i * 2 * cfg.points + j] = qv * g;
                }
                for (j, &g) in g_logits.data().iter().enumerate() {
                    gaw[i * cfg.points + j] = qv * g;
                }
            }
        }
        acc.push(HeadGrads {
            off_w: g_off_w,
            off_b: DenseArray::from_vec(&[2 * cfg.points], g_off),
            att_w: g_att_w,
            att_b: g_logits,
            val_w: g_val_w,
            out_w: g_out_w,
        });
    }

    for (h, g) in acc.iter().enumerate() {
        params.accumulate(&format!("{prefix}.h{h}.off.w"), &g.off_w)?;
        params.accumulate(&format!("{prefix}.h{h}.off.b"), &g.off_b)?;
        params.accumulate(&format!("{prefix}.h{h}.att.w"), &g.att_w)?;
        params.accumulate(&format!("{prefix}.h{h}.att.b"), &g.att_b)?;
        params.accumulate(&format!("{prefix}.h{h}.val.w"), &g.val_w)?;
        params.accumulate(&format!("{prefix}.h{h}.out.w"), &g.out_w)?;
    }
    params.accumulate(&format!("{prefix}.proj.w"), &g_proj_w)?;
    params.accumulate(&format!("{prefix}.proj.b"), &DenseArray::from_vec(&[c_g], grad.to_vec()))?;
    Ok(())
}
