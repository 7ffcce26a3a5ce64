//! Conv + batch-norm + ReLU fusion of the reprojected trajectory maps with
//! the current frame's features.

use rand::Rng;

use crate::features::FeatureMap;
use crate::numerics::ops::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, conv2d, conv2d_backward, relu,
    relu_backward, BatchNormCtx, Conv2dCtx,
};
use crate::numerics::{xavier_uniform, DenseArray, NumericsError, ParamBundle};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

pub struct CbrCtx {
    conv: Conv2dCtx,
    bn: BatchNormCtx,
    post: DenseArray,
}

pub fn init_cbr_params<R: Rng>(
    params: &mut ParamBundle,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) {
    let w = xavier_uniform(&[c_out, c_in, 3, 3], c_in * 9, c_out * 9, rng);
    params.register(&format!("{prefix}.conv.w"), w, true);
    params.register(&format!("{prefix}.conv.b"), DenseArray::zeros(&[c_out]), true);
    let mut ones = DenseArray::zeros(&[c_out]);
    ones.fill(1.0);
    params.register(&format!("{prefix}.bn.gamma"), ones.clone(), true);
    params.register(&format!("{prefix}.bn.beta"), DenseArray::zeros(&[c_out]), true);
    // Running statistics ride along in checkpoints but are not optimized.
    params.register(&format!("{prefix}.bn.mean"), DenseArray::zeros(&[c_out]), false);
    params.register(&format!("{prefix}.bn.var"), ones, false);
}

fn concat_channels(maps: [&FeatureMap; 3]) -> Result<DenseArray, NumericsError> {
    let (h, w) = (maps[0].grid.height, maps[0].grid.width);
    for m in &maps[1..] {
        if m.grid.height != h || m.grid.width != w {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![h, w],
                got: vec![m.grid.height, m.grid.width],
            });
        }
    }
    let c: usize = maps.iter().map(|m| m.channels()).sum();
    let mut x = DenseArray::zeros(&[c, h, w]);
    let mut offset = 0;
    for m in maps {
        let plane = m.channels() * h * w;
        x.data_mut()[offset..offset + plane].copy_from_slice(m.data.data());
        offset += plane;
    }
    Ok(x)
}

/// Concatenate [trajectory-local, trajectory-global, current] along channels
/// and apply conv 3x3 -> batch norm -> ReLU. Training mode normalizes with
/// batch statistics and updates the running ones; inference uses the stored
/// running statistics and returns no context.
pub fn fuse_cbr(
    f_s_local: &FeatureMap,
    f_s_global: &FeatureMap,
    f_current: &FeatureMap,
    params: &mut ParamBundle,
    prefix: &str,
    train: bool,
) -> Result<(FeatureMap, Option<CbrCtx>), NumericsError> {
    let x = concat_channels([f_s_local, f_s_global, f_current])?;
    let w = params.value(&format!("{prefix}.conv.w"))?;
    let b = params.value(&format!("{prefix}.conv.b"))?;
    let (z, conv_ctx) = conv2d(&x, w, b)?;
    let gamma = params.value(&format!("{prefix}.bn.gamma"))?.clone();
    let beta = params.value(&format!("{prefix}.bn.beta"))?.clone();
    let grid = f_current.grid;
    if train {
        let mut mean = params.value(&format!("{prefix}.bn.mean"))?.clone();
        let mut var = params.value(&format!("{prefix}.bn.var"))?.clone();
        let (y, bn_ctx) = batchnorm_train(&z, &gamma, &beta, &mut mean, &mut var, BN_MOMENTUM, BN_EPS);
        params.get_mut(&format!("{prefix}.bn.mean"))?.value = mean;
        params.get_mut(&format!("{prefix}.bn.var"))?.value = var;
        let post = relu(&y);
        let map = FeatureMap::from_array(grid, post.clone())
            .map_err(|e| NumericsError::Invalid(e.to_string()))?;
        Ok((map, Some(CbrCtx { conv: conv_ctx, bn: bn_ctx, post })))
    } else {
        let mean = params.value(&format!("{prefix}.bn.mean"))?;
        let var = params.value(&format!("{prefix}.bn.var"))?;
        let y = batchnorm_infer(&z, &gamma, &beta, mean, var, BN_EPS);
        let map = FeatureMap::from_array(grid, relu(&y))
            .map_err(|e| NumericsError::Invalid(e.to_string()))?;
        Ok((map, None))
    }
}

/// Returns the gradient w.r.t. the concatenated input `[3C, H, W]`; callers
/// slice out the blocks they backpropagate further.
pub fn cbr_backward(
    ctx: &CbrCtx,
    grad_y: &DenseArray,
    params: &mut ParamBundle,
    prefix: &str,
) -> Result<DenseArray, NumericsError> {
    let g_bn_out = relu_backward(&ctx.post, grad_y);
    let gamma = params.value(&format!("{prefix}.bn.gamma"))?.clone();
    let mut g_gamma = DenseArray::zeros(gamma.shape());
    let mut g_beta = DenseArray::zeros(gamma.shape());
    let g_conv_out = batchnorm_backward(&ctx.bn, &gamma, &g_bn_out, &mut g_gamma, &mut g_beta);
    let w = params.value(&format!("{prefix}.conv.w"))?.clone();
    let mut g_w = DenseArray::zeros(w.shape());
    let mut g_b = DenseArray::zeros(&[w.dim(0)]);
    let g_x = conv2d_backward(&ctx.conv, &w, &g_conv_out, &mut g_w, &mut g_b);
    params.accumulate(&format!("{prefix}.bn.gamma"), &g_gamma)?;
    params.accumulate(&format!("{prefix}.bn.beta"), &g_beta)?;
    params.accumulate(&format!("{prefix}.conv.w"), &g_w)?;
    params.accumulate(&format!("{prefix}.conv.b"), &g_b)?;
    Ok(g_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGridSpec;
    use crate::numerics::gradcheck::{grad_check, grad_check_coords};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> BevGridSpec {
        BevGridSpec::new(0.0, 6.0, 0.0, 5.0, 1.0, 1.0).unwrap()
    }

    fn random_map(c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let mut m = FeatureMap::zeros(grid(), c);
        for v in m.data.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn zero_inputs_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 4;
        let z = FeatureMap::zeros(grid(), c);
        let mut params = ParamBundle::new();
        init_cbr_params(&mut params, "fuse", 3 * c, c, &mut rng);
        let (out, _) = fuse_cbr(&z, &z, &z, &mut params, "fuse", false).unwrap();
        assert!(out.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_tap_passthrough_recovers_the_current_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 3;
        let zeros = FeatureMap::zeros(grid(), c);
        let mut current = random_map(c, &mut rng);
        for v in current.data.data_mut() {
            *v = v.abs(); // nonnegative so ReLU is transparent
        }
        let mut params = ParamBundle::new();
        init_cbr_params(&mut params, "fuse", 3 * c, c, &mut rng);
        // sqrt(var + eps) == 1 exactly, so normalization is transparent.
        params.get_mut("fuse.bn.var").unwrap().value.fill(1.0 - BN_EPS);
        {
            // Conv selects the current-frame block (channels 2C..3C) center tap.
            let e = params.get_mut("fuse.conv.w").unwrap();
            e.value.fill(0.0);
            for ch in 0..c {
                let idx = e.value.data().len() / e.value.dim(0) * ch
                    + (2 * c + ch) * 9
                    + 4; // kernel center of a 3x3
                e.value.data_mut()[idx] = 1.0;
            }
        }
        let (out, _) = fuse_cbr(&zeros, &zeros, &current, &mut params, "fuse", false).unwrap();
        for (a, b) in out.data.data().iter().zip(current.data.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn training_mode_updates_running_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let a = random_map(c, &mut rng);
        let b = random_map(c, &mut rng);
        let cur = random_map(c, &mut rng);
        let mut params = ParamBundle::new();
        init_cbr_params(&mut params, "fuse", 3 * c, c, &mut rng);
        let before = params.value("fuse.bn.mean").unwrap().clone();
        let (_, ctx) = fuse_cbr(&a, &b, &cur, &mut params, "fuse", true).unwrap();
        assert!(ctx.is_some());
        let after = params.value("fuse.bn.mean").unwrap();
        assert_ne!(before.data(), after.data());
        assert!(!params.get("fuse.bn.mean").unwrap().trainable);
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 2;
        let a = random_map(c, &mut rng);
        let b = random_map(c, &mut rng);
        let cur = random_map(c, &mut rng);
        let mut params = ParamBundle::new();
        init_cbr_params(&mut params, "fuse", 3 * c, c, &mut rng);
        let n_out = c * 5 * 6;
        let loss_w: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();

        params.zero_grads();
        let (out, ctx) = fuse_cbr(&a, &b, &cur, &mut params, "fuse", true).unwrap();
        let _ = out;
        let g = DenseArray::from_vec(&[c, 5, 6], loss_w.clone());
        let g_x = cbr_backward(&ctx.unwrap(), &g, &mut params, "fuse").unwrap();

        // Fresh running stats per probe keep the loss a pure function.
        let eval = |p: &ParamBundle, a: &FeatureMap, b: &FeatureMap, cur: &FeatureMap| -> f64 {
            let mut p = p.clone();
            p.get_mut("fuse.bn.mean").unwrap().value.fill(0.0);
            p.get_mut("fuse.bn.var").unwrap().value.fill(1.0);
            let (o, _) = fuse_cbr(a, b, cur, &mut p, "fuse", true).unwrap();
            o.data.data().iter().zip(&loss_w).map(|(x, y)| x * y).sum()
        };

        for name in ["fuse.conv.w", "fuse.conv.b", "fuse.bn.gamma", "fuse.bn.beta"] {
            let value = params.value(name).unwrap().clone();
            let analytic = params.get(name).unwrap().grad.clone();
            let coords: Vec<usize> =
                (0..value.len()).step_by((value.len() / 24).max(1)).collect();
            let mut f = |vd: &[f64]| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().value = DenseArray::from_vec(value.shape(), vd.to_vec());
                eval(&p, &a, &b, &cur)
            };
            let report =
                grad_check_coords(&mut f, value.data(), analytic.data(), 1e-5, &coords);
            assert!(report.max_err < 1e-6, "{name}: {}", report.max_err);
        }

        // Input gradient via the local block (channels 0..C).
        let report = grad_check(
            |ad| {
                let mut am = a.clone();
                am.data = DenseArray::from_vec(&[c, 5, 6], ad.to_vec());
                eval(&params, &am, &b, &cur)
            },
            a.data.data(),
            &g_x.data()[..c * 5 * 6],
            1e-5,
        );
        assert!(report.max_err < 1e-6, "input grad err {}", report.max_err);
    }
}
