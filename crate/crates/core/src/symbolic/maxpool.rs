//! Bounds for `max{x_j, …, x_{j+k}}` where every `x_r = w_r · v + b_r` and the
//! shared inputs satisfy `v ≥ 0`.
//!
//! With `v ≥ 0`, `max_r w_r·v ≤ Σ_i max{w_{r,i}, 0}·v_i` and
//! `min_r w_r·v ≥ Σ_i min{w_{r,i}, 0}·v_i`. Both right-hand sides only involve
//! the upper bound of `v` once the coefficient sign is taken into account.

use super::{Interval, SymbolicError};

/// Coefficient rows over the pooled layer's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRows {
    /// Entrywise `max{w_{r,i}, 0}` over the surviving rows; all entries `≥ 0`.
    pub upper_row: Vec<f64>,
    /// Entrywise `min{w_{r,i}, 0}` over the surviving rows; all entries `≤ 0`.
    pub lower_row: Vec<f64>,
    pub upper_const: f64,
    pub lower_const: f64,
}

/// Indices of window members that can still be the maximum. A member is
/// dropped when its upper bound lies strictly below some other member's lower
/// bound; the member with the largest lower bound always survives.
pub fn prune_dominated(window: &[Interval]) -> Vec<usize> {
    let best_lo = window.iter().map(|iv| iv.lo).fold(f64::NEG_INFINITY, f64::max);
    (0..window.len()).filter(|&j| !(window[j].hi < best_lo)).collect()
}

/// Pool bound rows from the (already pruned) window rows and their biases.
/// The bias acts as a weight on a constant input, so it enters through the
/// maximum and minimum directly.
pub fn maxpool_bounds(rows: &[&[f64]], biases: &[f64]) -> Result<PoolRows, SymbolicError> {
    let first = rows.first().ok_or(SymbolicError::EmptyWindow)?;
    if biases.len() != rows.len() {
        return Err(SymbolicError::DimensionMismatch { expected: rows.len(), found: biases.len() });
    }
    let width = first.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(SymbolicError::DimensionMismatch { expected: width, found: bad.len() });
    }
    let mut upper_row = vec![0.0; width];
    let mut lower_row = vec![0.0; width];
    for row in rows {
        for (i, &w) in row.iter().enumerate() {
            upper_row[i] = f64::max(upper_row[i], w);
            lower_row[i] = f64::min(lower_row[i], w);
        }
    }
    let upper_const = biases.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lower_const = biases.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PoolRows { upper_row, lower_row, upper_const, lower_const })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_formula_entrywise() {
        let b = maxpool_bounds(&[&[1.0, -2.0], &[-1.0, 3.0]], &[0.5, -0.5]).unwrap();
        assert_eq!(b.upper_row, vec![1.0, 3.0]);
        assert_eq!(b.upper_const, 0.5);
        assert_eq!(b.lower_row, vec![-1.0, -2.0]);
        assert_eq!(b.lower_const, -0.5);
    }

    #[test]
    fn identical_rows() {
        let b = maxpool_bounds(&[&[2.0, -1.0], &[2.0, -1.0]], &[0.0, 0.0]).unwrap();
        assert_eq!(b.upper_row, vec![2.0, 0.0]);
        assert_eq!(b.lower_row, vec![0.0, -1.0]);
    }

    #[test]
    fn single_member_window() {
        let b = maxpool_bounds(&[&[3.0, -4.0, 0.0]], &[1.0]).unwrap();
        assert_eq!(b.upper_row, vec![3.0, 0.0, 0.0]);
        assert_eq!(b.lower_row, vec![0.0, -4.0, 0.0]);
        assert_eq!((b.upper_const, b.lower_const), (1.0, 1.0));
    }

    #[test]
    fn empty_window_is_an_error() {
        assert_eq!(maxpool_bounds(&[], &[]), Err(SymbolicError::EmptyWindow));
    }

    #[test]
    fn dominance() {
        let iv = |lo, hi| Interval::new(lo, hi);
        assert_eq!(prune_dominated(&[iv(5.0, 7.0), iv(1.0, 4.0)]), vec![0]);
        assert_eq!(prune_dominated(&[iv(1.0, 4.0), iv(3.0, 6.0)]), vec![0, 1]);
        assert_eq!(prune_dominated(&[iv(0.0, 2.0), iv(5.0, 6.0), iv(1.0, 5.5)]), vec![1, 2]);
        // Touching intervals are not strictly dominated.
        assert_eq!(prune_dominated(&[iv(0.0, 5.0), iv(5.0, 6.0)]), vec![0, 1]);
    }
}
