//! Global-branch aggregation: sum the feature columns under a trajectory's
//! candidate cells (plus radar features and a position code) and mix the
//! result through one learned square matrix.

use crate::features::FeatureMap;
use crate::numerics::{DenseArray, NumericsError, ParamBundle};
use rand::Rng;

use super::{positional_encoding, Candidate};
use crate::geometry::BevIndex;

/// Output of one (trajectory, frame) slot.
#[derive(Debug, Clone)]
pub struct GoaFrame {
    pub feature: Vec<f64>,
    /// False when no in-range candidate existed; `feature` is then all zeros.
    pub valid: bool,
    /// Out-of-range candidates skipped.
    pub dropped: usize,
}

/// Forward context kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GoaCtx {
    cells: Vec<BevIndex>,
    pre: DenseArray,
}

pub fn init_goa_params<R: Rng>(
    params: &mut ParamBundle,
    prefix: &str,
    c_g: usize,
    rng: &mut R,
) {
    let w = crate::numerics::xavier_uniform(&[c_g, c_g], c_g, c_g, rng);
    params.register(&format!("{prefix}.w"), w, true);
}

/// Aggregate one candidate set. Candidates are re-sorted into a canonical
/// order before summation so the output is bit-identical under permutation
/// of the input list.
pub fn goa_frame(
    global: &FeatureMap,
    radar: Option<&FeatureMap>,
    cands: &[Candidate],
    params: &ParamBundle,
    prefix: &str,
    use_pe: bool,
) -> Result<(GoaFrame, GoaCtx), NumericsError> {
    let w_a = params.value(&format!("{prefix}.w"))?;
    let c_g = global.channels();
    if w_a.shape() != [c_g, c_g] {
        return Err(NumericsError::ShapeMismatch {
            expected: vec![c_g, c_g],
            got: w_a.shape().to_vec(),
        });
    }
    if let Some(r) = radar {
        if r.channels() != c_g {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![c_g],
                got: vec![r.channels()],
            });
        }
    }

    let mut cells: Vec<BevIndex> =
        cands.iter().filter(|c| c.index.in_range).map(|c| c.index).collect();
    let dropped = cands.len() - cells.len();
    cells.sort_by_key(|i| (i.ix, i.iy, i.fx.to_bits(), i.fy.to_bits()));

    if cells.is_empty() {
        let out = GoaFrame { feature: vec![0.0; c_g], valid: false, dropped };
        return Ok((out, GoaCtx { cells, pre: DenseArray::zeros(&[c_g]) }));
    }

    let mut pre = DenseArray::zeros(&[c_g]);
    for idx in &cells {
        let (iy, ix) = (idx.iy as usize, idx.ix as usize);
        let p = pre.data_mut();
        for c in 0..c_g {
            p[c] += global.at(c, iy, ix);
        }
        if let Some(r) = radar {
            for c in 0..c_g {
                p[c] += r.at(c, iy, ix);
            }
        }
        if use_pe {
            let pe = positional_encoding(idx.fx, idx.fy, c_g);
            for c in 0..c_g {
                p[c] += pe[c];
            }
        }
    }

    // y = pre * W_a (bias-free).
    let mut feature = vec![0.0; c_g];
    let (pd, wd) = (pre.data(), w_a.data());
    for (i, &pv) in pd.iter().enumerate() {
        if pv == 0.0 {
            continue;
        }
        for (j, f) in feature.iter_mut().enumerate() {
            *f += pv * wd[i * c_g + j];
        }
    }
    Ok((GoaFrame { feature, valid: true, dropped }, GoaCtx { cells, pre }))
}

/// `grad` is dL/d(output). Accumulates the mixing-matrix gradient; when the
/// radar map is learned upstream, pass its gradient buffer to receive the
/// per-cell contributions.
pub fn goa_frame_backward(
    ctx: &GoaCtx,
    grad: &[f64],
    params: &mut ParamBundle,
    prefix: &str,
    grad_radar: Option<&mut DenseArray>,
) -> Result<(), NumericsError> {
    if ctx.cells.is_empty() {
        return Ok(());
    }
    let name = format!("{prefix}.w");
    let w_a = params.value(&name)?;
    let c_g = w_a.dim(0);
    debug_assert_eq!(grad.len(), c_g);

    let mut gw = DenseArray::zeros(&[c_g, c_g]);
    let mut gpre = vec![0.0; c_g];
    {
        let (pd, wd, gwd) = (ctx.pre.data(), w_a.data(), gw.data_mut());
        for i in 0..c_g {
            for j in 0..c_g {
                gwd[i * c_g + j] = pd[i] * grad[j];
                gpre[i] += grad[j] * wd[i * c_g + j];
            }
        }
    }
    params.accumulate(&name, &gw)?;

    if let Some(gr) = grad_radar {
        // pre sums one radar column per candidate cell; duplicates add twice.
        for idx in &ctx.cells {
            let (iy, ix) = (idx.iy as usize, idx.ix as usize);
            for (c, &g) in gpre.iter().enumerate() {
                let i = gr.idx3(c, iy, ix);
                gr.data_mut()[i] += g;
            }
        }
    }
    Ok(())
}
