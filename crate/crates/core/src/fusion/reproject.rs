//! Scatter per-trajectory feature vectors onto the BEV grid at each track's
//! current cell. Trajectories landing on the same cell sum, which keeps the
//! operation linear and order-independent.

use crate::features::FeatureMap;
use crate::geometry::{BevGridSpec, BevIndex};
use crate::numerics::{DenseArray, NumericsError};

/// Cells written per trajectory; `None` when the index was out of range.
#[derive(Debug, Clone)]
pub struct ReprojectCtx {
    cells: Vec<Option<(usize, usize)>>,
}

impl ReprojectCtx {
    pub fn dropped(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }
}

/// `features` is `[R, C]`, one row per trajectory.
pub fn reproject(
    features: &DenseArray,
    indexes: &[BevIndex],
    grid: &BevGridSpec,
) -> Result<(FeatureMap, ReprojectCtx), NumericsError> {
    if features.rank() != 2 || features.dim(0) != indexes.len() {
        return Err(NumericsError::ShapeMismatch {
            expected: vec![indexes.len(), 0],
            got: features.shape().to_vec(),
        });
    }
    let c = features.dim(1);
    let mut map = FeatureMap::zeros(*grid, c);
    let mut cells = Vec::with_capacity(indexes.len());
    for (r, idx) in indexes.iter().enumerate() {
        if !idx.in_range {
            cells.push(None);
            continue;
        }
        let (iy, ix) = (idx.iy as usize, idx.ix as usize);
        for ch in 0..c {
            let v = map.at(ch, iy, ix) + features.at2(r, ch);
            map.set(ch, iy, ix, v);
        }
        cells.push(Some((iy, ix)));
    }
    Ok((map, ReprojectCtx { cells }))
}

/// Gather: each trajectory reads the map gradient at its cell (colliding
/// trajectories share it). Dropped trajectories get zero rows.
pub fn reproject_backward(ctx: &ReprojectCtx, grad_map: &DenseArray) -> DenseArray {
    let c = grad_map.dim(0);
    let mut g = DenseArray::zeros(&[ctx.cells.len(), c]);
    for (r, cell) in ctx.cells.iter().enumerate() {
        if let Some((iy, ix)) = cell {
            for ch in 0..c {
                let i = g.idx2(r, ch);
                g.data_mut()[i] = grad_map.at3(ch, *iy, *ix);
            }
        }
    }
    g
}
