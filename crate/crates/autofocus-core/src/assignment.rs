//! Minimum-cost assignment on rectangular cost matrices.
//!
//! The solver follows the shortest-augmenting-path formulation of the
//! Jonker-Volgenant algorithm on dense float matrices. On top of the optimal
//! total, [`hungarian`] canonicalizes the returned pairing so that among all
//! minimum-cost maximum-cardinality assignments the lexicographically
//! smallest (by ascending row, then column) is produced. The tracker relies
//! on that for reproducible tie-breaking.

use crate::error::{Error, Result};

/// Solves the dense LAP for `nr <= nc` and returns `col4row`.
///
/// `cost` is row-major with `nr * nc` finite entries. Each row is assigned a
/// distinct column; the assignment minimizes the total cost.
fn solve_rectangular(nr: usize, nc: usize, cost: &[f64]) -> Vec<usize> {
    debug_assert!(nr <= nc);
    let mut u = vec![0.0f64; nr];
    let mut v = vec![0.0f64; nc];
    let mut col4row = vec![usize::MAX; nr];
    let mut row4col = vec![usize::MAX; nc];

    for cur_row in 0..nr {
        let mut shortest = vec![f64::INFINITY; nc];
        let mut path = vec![usize::MAX; nc];
        let mut scanned_rows = vec![false; nr];
        let mut scanned_cols = vec![false; nc];
        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let sink = loop {
            scanned_rows[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = usize::MAX;
            for j in 0..nc {
                if scanned_cols[j] {
                    continue;
                }
                let reduced = min_val + cost[i * nc + j] - u[i] - v[j];
                if reduced < shortest[j] {
                    shortest[j] = reduced;
                    path[j] = i;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == usize::MAX) {
                    lowest = shortest[j];
                    index = j;
                }
            }
            min_val = lowest;
            let j = index;
            scanned_cols[j] = true;
            if row4col[j] == usize::MAX {
                break j;
            }
            i = row4col[j];
        };

        u[cur_row] += min_val;
        for r in 0..nr {
            if scanned_rows[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for j in 0..nc {
            if scanned_cols[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    col4row
}

/// Optimal total over the submatrix selected by `rows` x `cols`.
fn subproblem_total(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let k = rows.len().min(cols.len());
    if k == 0 {
        return 0.0;
    }
    let (nr, nc, flat) = if rows.len() <= cols.len() {
        let mut flat = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            for &c in cols {
                flat.push(cost[r][c]);
            }
        }
        (rows.len(), cols.len(), flat)
    } else {
        let mut flat = Vec::with_capacity(rows.len() * cols.len());
        for &c in cols {
            for &r in rows {
                flat.push(cost[r][c]);
            }
        }
        (cols.len(), rows.len(), flat)
    };
    let col4row = solve_rectangular(nr, nc, &flat);
    (0..nr).map(|r| flat[r * nc + col4row[r]]).sum()
}

/// Minimum-cost maximum-cardinality assignment.
///
/// Returns `min(n, m)` `(row, col)` pairs sorted by row, each row and column
/// used at most once, minimizing the summed cost. Ties between equally cheap
/// assignments resolve to the lexicographically smallest pairing.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    for (r, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(Error::Assignment(format!(
                "row {r} has {} columns, expected {m}",
                row.len()
            )));
        }
        for (c, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Assignment(format!("non-finite entry at ({r}, {c})")));
            }
        }
    }
    if m == 0 {
        return Ok(Vec::new());
    }

    let mut active_rows: Vec<usize> = (0..n).collect();
    let mut active_cols: Vec<usize> = (0..m).collect();
    let mut target = subproblem_total(cost, &active_rows, &active_cols);
    let mut pairs = Vec::with_capacity(n.min(m));

    // Fix pairs row by row: the earliest row takes the earliest column that
    // still admits an optimal completion. A row may stay unassigned only
    // when rows outnumber columns and skipping it keeps the optimum. Each
    // pass settles the earliest active row, so position 0 is always next.
    while !active_rows.is_empty() && !active_cols.is_empty() {
        let r = active_rows[0];
        let tol = 1e-9 * (1.0 + target.abs());
        let mut chosen: Option<(usize, f64)> = None;
        let mut fallback: Option<(usize, f64, f64)> = None;
        for (cj, &c) in active_cols.iter().enumerate() {
            let sub_rows: Vec<usize> =
                active_rows.iter().copied().filter(|&x| x != r).collect();
            let sub_cols: Vec<usize> =
                active_cols.iter().copied().filter(|&x| x != c).collect();
            let sub_total = subproblem_total(cost, &sub_rows, &sub_cols);
            let gap = (sub_total + cost[r][c] - target).abs();
            if gap <= tol {
                chosen = Some((cj, sub_total));
                break;
            }
            if fallback.is_none_or(|(_, _, g)| gap < g) {
                fallback = Some((cj, sub_total, gap));
            }
        }
        if chosen.is_none() && active_rows.len() > active_cols.len() {
            // More rows than columns: check whether this row sits out.
            let sub_rows: Vec<usize> =
                active_rows.iter().copied().filter(|&x| x != r).collect();
            let skip_total = subproblem_total(cost, &sub_rows, &active_cols);
            if (skip_total - target).abs() <= tol {
                active_rows.remove(0);
                continue;
            }
        }
        let (cj, sub_total) = match (chosen, fallback) {
            (Some(hit), _) => hit,
            // Numerically every row should find a column when rows <= cols;
            // fall back to the closest candidate rather than dropping a pair.
            (None, Some((cj, sub_total, _))) => (cj, sub_total),
            (None, None) => unreachable!("active_cols is non-empty"),
        };
        pairs.push((r, active_cols[cj]));
        active_cols.remove(cj);
        active_rows.remove(0);
        target = sub_total;
    }

    Ok(pairs)
}

/// Sum of the matrix entries selected by an assignment.
pub fn assignment_total(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r][c]).sum()
}
