use super::{MatchError, MatchResult};

fn tie_tol(v: f64) -> f64 {
    1e-9 * (1.0 + v.abs())
}

fn check(cost: &[f64], k: usize) -> Result<(), MatchError> {
    if k == 0 || cost.len() != k * k {
        return Err(MatchError::NotSquare { rows: k, cols: if k == 0 { 0 } else { cost.len() / k } });
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(MatchError::NonFinite { row: i / k, col: i % k });
    }
    Ok(())
}

/// Sum of `cost[j][perm[j]]` in row order.
pub fn assignment_cost(cost: &[f64], k: usize, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(j, &i)| cost[j * k + i]).sum()
}

/// Optimal value of the assignment problem on rows `rows` and columns
/// `cols` of a `k x k` matrix (shortest augmenting paths with potentials).
fn optimum(cost: &[f64], k: usize, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let c = |i: usize, j: usize| cost[rows[i - 1] * k + cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[rows[i] * k + cols[assign[i]]]).sum();
    (total, assign)
}

/// Minimum-cost assignment of rows to columns of a square `k x k` matrix.
///
/// Among optimal assignments the lexicographically smallest permutation is
/// returned: each row in turn takes the smallest column that still admits
/// an optimal completion.
pub fn hungarian(cost: &[f64], k: usize) -> Result<MatchResult, MatchError> {
    check(cost, k)?;
    let all: Vec<usize> = (0..k).collect();
    let (best, _) = optimum(cost, k, &all, &all);
    let mut perm = Vec::with_capacity(k);
    let mut free: Vec<usize> = all.clone();
    let mut spent = 0.0;
    for row in 0..k {
        let rest_rows: Vec<usize> = (row + 1..k).collect();
        let mut chosen = None;
        for (pos, &col) in free.iter().enumerate() {
            let mut rest_cols = free.clone();
            rest_cols.remove(pos);
            let tail = if rest_rows.is_empty() { 0.0 } else { optimum(cost, k, &rest_rows, &rest_cols).0 };
            if spent + cost[row * k + col] + tail <= best + tie_tol(best) {
                chosen = Some(pos);
                break;
            }
        }
        // Rounding can make every candidate look slightly worse; fall back
        // to the column of a fresh optimal completion.
        let pos = chosen.unwrap_or_else(|| {
            optimum(cost, k, &(row..k).collect::<Vec<_>>(), &free).1[0]
        });
        let col = free.remove(pos);
        spent += cost[row * k + col];
        perm.push(col);
    }
    Ok(result(cost, k, perm))
}

fn result(cost: &[f64], k: usize, perm: Vec<usize>) -> MatchResult {
    let pair_costs: Vec<f64> = perm.iter().enumerate().map(|(j, &i)| cost[j * k + i]).collect();
    let total = assignment_cost(cost, k, &perm);
    MatchResult { perm, pair_costs, total }
}

/// Exhaustive search over all `k!` permutations in lexicographic order; the
/// first permutation within rounding of the optimum wins.
pub fn brute_force_assignment(cost: &[f64], k: usize) -> Result<MatchResult, MatchError> {
    check(cost, k)?;
    let mut perm: Vec<usize> = (0..k).collect();
    let mut all = Vec::new();
    loop {
        all.push((assignment_cost(cost, k, &perm), perm.clone()));
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let best = all.iter().map(|(c, _)| *c).fold(f64::INFINITY, f64::min);
    let (_, p) = all.into_iter().find(|(c, _)| *c <= best + tie_tol(best)).expect("at least one permutation");
    Ok(result(cost, k, p))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
