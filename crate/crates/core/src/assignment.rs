//! Rectangular maximum-weight linear assignment, plus an exhaustive oracle
//! for small instances.
//!
//! Maximization is reduced to minimization by negation and solved with the
//! shortest-augmenting-path Hungarian algorithm on the smaller side; the
//! rectangular case is handled directly instead of padding to square.

use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssignmentError {
    #[error("weight matrix must have at least one row and one column")]
    Empty,
    #[error("weight matrix has a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("brute force handles min side up to {limit}, got {got}")]
    TooLarge { limit: usize, got: usize },
}

/// A one-to-one matching covering the smaller side of the weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    /// (row, column) pairs, sorted by row index.
    pub matches: Vec<(usize, usize)>,
    /// Sum of the selected weights.
    pub total_weight: T,
}

const BRUTE_FORCE_LIMIT: usize = 8;

/// Maximum-weight assignment of size min(rows, cols). Deterministic under
/// ties: rows are processed in order and the lowest-index column wins.
pub fn solve_max_assignment<T: Scalar>(
    weights: &Matrix<T>,
) -> Result<Assignment<T>, AssignmentError> {
    validate(weights)?;
    let (p, q) = (weights.rows(), weights.cols());
    let matches = if p <= q {
        let cost = Matrix::from_fn(p, q, |i, j| -weights.get(i, j));
        hungarian_min(&cost).into_iter().enumerate().collect()
    } else {
        let cost = Matrix::from_fn(q, p, |i, j| -weights.get(j, i));
        let mut pairs: Vec<(usize, usize)> = hungarian_min(&cost)
            .into_iter()
            .enumerate()
            .map(|(col, row)| (row, col))
            .collect();
        pairs.sort_unstable();
        pairs
    };
    Ok(finish(weights, matches))
}

/// Exhaustive maximizer over all injections of the smaller side; ties break
/// to the lexicographically smallest row-sorted match list.
pub fn brute_force_assignment<T: Scalar>(
    weights: &Matrix<T>,
) -> Result<Assignment<T>, AssignmentError> {
    validate(weights)?;
    let (p, q) = (weights.rows(), weights.cols());
    let small = p.min(q);
    if small > BRUTE_FORCE_LIMIT {
        return Err(AssignmentError::TooLarge {
            limit: BRUTE_FORCE_LIMIT,
            got: small,
        });
    }
    let rows_small = p <= q;
    let (ns, nl) = if rows_small { (p, q) } else { (q, p) };

    let mut best: Option<(T, Vec<(usize, usize)>)> = None;
    let mut used = vec![false; nl];
    let mut chosen = vec![0usize; ns];

    #[allow(clippy::too_many_arguments)]
    fn recurse<T: Scalar>(
        weights: &Matrix<T>,
        rows_small: bool,
        level: usize,
        ns: usize,
        nl: usize,
        used: &mut [bool],
        chosen: &mut [usize],
        best: &mut Option<(T, Vec<(usize, usize)>)>,
    ) {
        if level == ns {
            let mut pairs: Vec<(usize, usize)> = (0..ns)
                .map(|s| {
                    if rows_small {
                        (s, chosen[s])
                    } else {
                        (chosen[s], s)
                    }
                })
                .collect();
            pairs.sort_unstable();
            let total: T = pairs.iter().map(|&(r, c)| weights.get(r, c)).sum();
            let better = match best {
                None => true,
                Some((bt, bp)) => total > *bt || (total == *bt && pairs < *bp),
            };
            if better {
                *best = Some((total, pairs));
            }
            return;
        }
        for cand in 0..nl {
            if !used[cand] {
                used[cand] = true;
                chosen[level] = cand;
                recurse(weights, rows_small, level + 1, ns, nl, used, chosen, best);
                used[cand] = false;
            }
        }
    }

    recurse(
        weights, rows_small, 0, ns, nl, &mut used, &mut chosen, &mut best,
    );
    let (_, matches) = best.expect("non-empty instance always has an assignment");
    Ok(finish(weights, matches))
}

fn validate<T: Scalar>(weights: &Matrix<T>) -> Result<(), AssignmentError> {
    if weights.rows() == 0 || weights.cols() == 0 {
        return Err(AssignmentError::Empty);
    }
    if let Some((row, col)) = weights.find_non_finite() {
        return Err(AssignmentError::NonFinite { row, col });
    }
    Ok(())
}

fn finish<T: Scalar>(weights: &Matrix<T>, matches: Vec<(usize, usize)>) -> Assignment<T> {
    let total_weight = matches.iter().map(|&(r, c)| weights.get(r, c)).sum();
    Assignment {
        matches,
        total_weight,
    }
}

/// Shortest-augmenting-path Hungarian minimization for p <= q; returns the
/// matched column of each row. Columns are scanned in ascending index with
/// strict improvement, which fixes the tie order.
fn hungarian_min<T: Scalar>(cost: &Matrix<T>) -> Vec<usize> {
    let p = cost.rows();
    let q = cost.cols();
    debug_assert!(p <= q);
    // 1-based with a sentinel column 0; matched_row[j] is the row matched to
    // column j (0 = free).
    let mut u = vec![T::zero(); p + 1];
    let mut v = vec![T::zero(); q + 1];
    let mut matched_row = vec![0usize; q + 1];
    let mut way = vec![0usize; q + 1];

    for i in 1..=p {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![T::infinity(); q + 1];
        let mut used = vec![false; q + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = T::infinity();
            let mut j1 = 0usize;
            for j in 1..=q {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=q {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![usize::MAX; p];
    for j in 1..=q {
        if matched_row[j] != 0 {
            col_of_row[matched_row[j] - 1] = j - 1;
        }
    }
    debug_assert!(col_of_row.iter().all(|&c| c != usize::MAX));
    col_of_row
}
