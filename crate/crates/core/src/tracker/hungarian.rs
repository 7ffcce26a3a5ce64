//! Minimum-cost assignment via shortest augmenting paths with potentials.
//! O(n^2 m) for an n x m matrix; deterministic, ties resolve to the lowest
//! row and then the lowest column.

use super::TrackError;

const NONE: usize = usize::MAX;

/// Core solver; requires rows <= cols. Returns row -> col.
fn lap_rows_le_cols(n: usize, m: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m + 1];
    // col -> row; index m is the virtual start column.
    let mut p = vec![NONE; m + 1];
    let mut way = vec![m; m];
    for i in 0..n {
        p[m] = i;
        let mut j0 = m;
        let mut minv = vec![f64::INFINITY; m];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = NONE;
            for j in 0..m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            u[p[m]] += delta;
            v[m] -= delta;
            j0 = j1;
            if p[j0] == NONE {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == m {
                break;
            }
        }
    }
    let mut assignment = vec![NONE; n];
    for j in 0..m {
        if p[j] != NONE {
            assignment[p[j]] = j;
        }
    }
    assignment
}

/// Minimum-cost maximal matching of a rows x cols cost matrix. Every row of
/// the smaller side is matched; pairs are returned sorted by row.
pub fn hungarian(
    rows: usize,
    cols: usize,
    cost: impl Fn(usize, usize) -> f64,
) -> Result<Vec<(usize, usize)>, TrackError> {
    for r in 0..rows {
        for c in 0..cols {
            if !cost(r, c).is_finite() {
                return Err(TrackError::NonFiniteCost { row: r, col: c });
            }
        }
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    let mut pairs: Vec<(usize, usize)> = if rows <= cols {
        lap_rows_le_cols(rows, cols, &cost)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        lap_rows_le_cols(cols, rows, &|c, r| cost(r, c))
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

/// Total cost of an assignment.
pub fn assignment_cost(pairs: &[(usize, usize)], cost: impl Fn(usize, usize) -> f64) -> f64 {
    pairs.iter().map(|&(r, c)| cost(r, c)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_matrix<'a>(m: &'a [&'a [f64]]) -> (usize, usize, impl Fn(usize, usize) -> f64 + 'a) {
        let rows = m.len();
        let cols = m[0].len();
        (rows, cols, move |r, c| m[r][c])
    }

    #[test]
    fn two_by_two_prefers_the_diagonal() {
        let m: &[&[f64]] = &[&[1.0, 2.0], &[2.0, 1.0]];
        let (r, c, f) = from_matrix(m);
        let pairs = hungarian(r, c, &f).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&pairs, &f), 2.0);
    }

    #[test]
    fn uniform_ties_resolve_to_lowest_indices() {
        let m: &[&[f64]] = &[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]];
        let (r, c, f) = from_matrix(m);
        assert_eq!(hungarian(r, c, &f).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn rectangular_matches_the_smaller_side() {
        let m: &[&[f64]] = &[&[5.0, 1.0, 3.0, 9.0], &[4.0, 8.0, 2.0, 7.0]];
        let (r, c, f) = from_matrix(m);
        let pairs = hungarian(r, c, &f).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(assignment_cost(&pairs, &f), 3.0);

        let tall: &[&[f64]] = &[&[5.0, 1.0], &[4.0, 8.0], &[2.0, 7.0]];
        let (r, c, f) = from_matrix(tall);
        let pairs = hungarian(r, c, &f).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(assignment_cost(&pairs, &f), 3.0);
    }

    #[test]
    fn non_finite_costs_error() {
        assert!(hungarian(2, 2, |r, c| if (r, c) == (1, 1) { f64::NAN } else { 1.0 }).is_err());
    }

    #[test]
    fn matches_brute_force_on_small_random_matrices() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=4usize);
            let m = rng.random_range(1..=4usize);
            let mat: Vec<Vec<f64>> =
                (0..n).map(|_| (0..m).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let f = |r: usize, c: usize| mat[r][c];
            let pairs = hungarian(n, m, f).unwrap();
            let got = assignment_cost(&pairs, f);
            let best = brute_force_min(&mat);
            assert!((got - best).abs() < 1e-9, "{got} vs {best} for {mat:?}");
        }
    }

    fn brute_force_min(mat: &[Vec<f64>]) -> f64 {
        let (n, m) = (mat.len(), mat[0].len());
        let (small, large, flip) = if n <= m { (n, m, false) } else { (m, n, true) };
        let mut cols: Vec<usize> = (0..large).collect();
        let mut best = f64::INFINITY;
        permute(&mut cols, 0, small, &mut |perm| {
            let total: f64 = (0..small)
                .map(|i| if flip { mat[perm[i]][i] } else { mat[i][perm[i]] })
                .sum();
            best = best.min(total);
        });
        best
    }

    fn permute(items: &mut Vec<usize>, k: usize, depth: usize, visit: &mut impl FnMut(&[usize])) {
        if k == depth {
            visit(&items[..depth]);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, depth, visit);
            items.swap(k, i);
        }
    }
}
