//! Maximum-weight bipartite assignment (Kuhn-Munkres with potentials).

/// Returns, for each row, the column it is assigned to. Only pairs whose
/// weight is `Some(w)` with `w > 0` can appear in the result; the total
/// weight of the returned pairs is maximal among all such matchings.
pub fn max_weight_assignment(weights: &[Vec<Option<f64>>], cols: usize) -> Vec<Option<usize>> {
    let rows = weights.len();
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    // Minimisation form on an n x n padded matrix; forbidden or padded cells
    // cost 0, which equals leaving that row unmatched.
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            match weights[i][j] {
                Some(w) if w > 0.0 => -w,
                _ => 0.0,
            }
        } else {
            0.0
        }
    };

    // 1-based arrays as in the classic O(n^3) formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i == 0 || i > rows || j > cols {
            continue;
        }
        if matches!(weights[i - 1][j - 1], Some(w) if w > 0.0) {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(weights: &[Vec<Option<f64>>], cols: usize) -> f64 {
        fn go(i: usize, weights: &[Vec<Option<f64>>], used: &mut Vec<bool>, acc: f64) -> f64 {
            if i == weights.len() {
                return acc;
            }
            let mut best = go(i + 1, weights, used, acc);
            for j in 0..used.len() {
                if used[j] {
                    continue;
                }
                if let Some(w) = weights[i][j].filter(|w| *w > 0.0) {
                    used[j] = true;
                    best = best.max(go(i + 1, weights, used, acc + w));
                    used[j] = false;
                }
            }
            best
        }
        go(0, weights, &mut vec![false; cols], 0.0)
    }

    fn total(weights: &[Vec<Option<f64>>], a: &[Option<usize>]) -> f64 {
        a.iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| weights[i][j].unwrap()))
            .sum()
    }

    #[test]
    fn prefers_global_optimum_over_greedy() {
        let w = vec![
            vec![Some(0.9), Some(0.8)],
            vec![Some(0.85), Some(0.1)],
        ];
        let a = max_weight_assignment(&w, 2);
        assert_eq!(a, vec![Some(1), Some(0)]);
    }

    #[test]
    fn empty_inputs() {
        assert!(max_weight_assignment(&[], 3).is_empty());
        assert_eq!(max_weight_assignment(&[vec![]], 0), vec![None]);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(
            rows in 1usize..6,
            cols in 1usize..6,
            cells in prop::collection::vec(prop::option::of(0.0f64..1.0), 36),
        ) {
            let w: Vec<Vec<Option<f64>>> = (0..rows)
                .map(|i| (0..cols).map(|j| cells[i * 6 + j]).collect())
                .collect();
            let a = max_weight_assignment(&w, cols);
            let mut seen = vec![false; cols];
            for j in a.iter().flatten() {
                prop_assert!(!seen[*j]);
                seen[*j] = true;
            }
            prop_assert!((total(&w, &a) - brute_force(&w, cols)).abs() < 1e-9);
        }
    }
}
