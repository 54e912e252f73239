//! Split conformal prediction baseline: the finite-sample corrected quantile
//! of calibration nonconformity scores.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitConformalError {
    #[error("score list is empty")]
    EmptyScores,
    #[error("alpha must lie in (0, 1), got {0}")]
    AlphaOutOfRange(f64),
    #[error("scores contain NaN")]
    NotANumber,
}

/// 1-based rank `ceil((n + 1)(1 - alpha))` of the conformal quantile.
///
/// A relative slack of 1e-9 absorbs representation error in `1 - alpha`, so
/// that e.g. `5 * (1 - 0.4)` ranks as 3 rather than 4.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n + 1) as f64 * (1.0 - alpha);
    let slack = 1e-9 * (n + 1) as f64;
    ((x - slack).ceil().max(1.0)) as usize
}

/// The `ceil((n+1)(1-alpha))`-th smallest score, or `+inf` when that rank
/// exceeds `n`.
pub fn split_cp_quantile(scores: &[f64], alpha: f64) -> Result<f64, SplitConformalError> {
    if scores.is_empty() {
        return Err(SplitConformalError::EmptyScores);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SplitConformalError::AlphaOutOfRange(alpha));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(SplitConformalError::NotANumber);
    }
    let rank = conformal_rank(scores.len(), alpha);
    if rank > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

/// Labels whose score does not exceed the quantile.
pub fn conformal_set<L: Clone>(candidates: &[(L, f64)], quantile: f64) -> Vec<L> {
    candidates
        .iter()
        .filter(|(_, s)| *s <= quantile)
        .map(|(l, _)| l.clone())
        .collect()
}
