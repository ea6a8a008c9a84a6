//! Maximum-weight bipartite matching where vertices may stay unmatched.
//!
//! Shortest-augmenting-path Hungarian method on the rectangular cost matrix
//! `−max(w, 0)`, transposed so rows never outnumber columns. Every row gets a
//! column; pairs whose clipped weight is zero are then dropped, which makes
//! the result an optimal partial matching.

use nalgebra::DMatrix;

/// Row → column assignment minimising total cost; requires rows ≤ cols.
fn hungarian_min(cost: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = cost.shape();
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // owner[j]: 1-based row matched to column j (0 = free).
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Maximum-weight matching using only strictly positive entries of
/// `weights`. Returns (row, col) pairs sorted by row.
pub fn max_weight_matching(weights: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (n, m) = weights.shape();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let clipped = weights.map(|w| if w > 0.0 { w } else { 0.0 });
    let mut pairs: Vec<(usize, usize)> = if n <= m {
        hungarian_min(&(-&clipped)).into_iter().enumerate().collect()
    } else {
        hungarian_min(&(-clipped.transpose())).into_iter().enumerate().map(|(c, r)| (r, c)).collect()
    };
    pairs.retain(|&(r, c)| clipped[(r, c)] > 0.0);
    pairs.sort_unstable();
    pairs
}
