//! Central finite-difference gradient checking.

/// Worst-coordinate comparison of an analytic gradient against central
/// differences of a scalar function. The error is relative for gradients
/// above unit scale and absolute below it, so sign flips on O(1) gradients
/// always register while tiny true gradients do not drown in quotient noise.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_err: f64,
    pub worst_coord: usize,
    pub checked: usize,
}

fn coord_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks every coordinate of `x`. `f` must be a pure function of `x`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(&mut f, x, analytic, h, &coords)
}

/// Checks only the listed coordinates; used to sample large parameter blocks.
pub fn grad_check_coords(
    f: &mut impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    coords: &[usize],
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut report = GradCheckReport { max_err: 0.0, worst_coord: 0, checked: coords.len() };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = coord_err(analytic[i], numeric);
        if err > report.max_err {
            report.max_err = err;
            report.worst_coord = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let x = [1.5, -2.0, 0.25];
        let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let analytic: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        let rep = grad_check(f, &x, &analytic, 1e-5);
        assert!(rep.max_err < 1e-8, "err {}", rep.max_err);
    }

    #[test]
    fn sign_flip_is_detected() {
        let x = [0.7, -1.2];
        let f = |v: &[f64]| 3.0 * v[0] - 2.0 * v[1];
        let corrupted = [-3.0_f64, -2.0];
        let rep = grad_check(f, &x, &corrupted, 1e-5);
        assert!(rep.max_err > 0.1, "corrupted gradient must be flagged, got {}", rep.max_err);
        assert_eq!(rep.worst_coord, 0);
    }
}
