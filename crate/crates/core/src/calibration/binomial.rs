//! Lower binomial tail probabilities.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BinomialError {
    #[error("n must be positive")]
    ZeroTrials,
    #[error("alpha must lie in (0, 1), got {0}")]
    AlphaOutOfRange(f64),
    #[error("failure count {s} outside [0, {n}]")]
    CountOutOfRange { s: i64, n: u64 },
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `Pr(Binom(n, alpha) <= s)`.
///
/// The pmf is accumulated by the ratio recurrence outward from the mode with
/// the mode's weight fixed at 1, and the tail is normalized by the total
/// weight. No factorials or large logarithms are formed, so the relative
/// error stays near machine precision for every `n`.
pub fn binomial_tail_p(n: u64, alpha: f64, s: i64) -> Result<f64, BinomialError> {
    if n == 0 {
        return Err(BinomialError::ZeroTrials);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BinomialError::AlphaOutOfRange(alpha));
    }
    if s < 0 || s as u64 > n {
        return Err(BinomialError::CountOutOfRange { s, n });
    }
    let s = s as u64;
    if s == n {
        return Ok(1.0);
    }

    let q = 1.0 - alpha;
    let mode = (((n + 1) as f64 * alpha).floor() as u64).min(n);

    let mut total = CompensatedSum::default();
    let mut lower = CompensatedSum::default();
    total.add(1.0);
    if mode <= s {
        lower.add(1.0);
    }

    // below the mode: w(i) = w(i+1) * (i+1) q / ((n-i) alpha)
    let mut w = 1.0;
    let mut i = mode;
    while i > 0 {
        i -= 1;
        w *= ((i + 1) as f64 * q) / ((n - i) as f64 * alpha);
        if w == 0.0 {
            break;
        }
        total.add(w);
        if i <= s {
            lower.add(w);
        }
    }

    // above the mode: w(i) = w(i-1) * (n-i+1) alpha / (i q)
    let mut w = 1.0;
    for i in mode + 1..=n {
        w *= ((n - i + 1) as f64 * alpha) / (i as f64 * q);
        if w == 0.0 {
            break;
        }
        total.add(w);
        if i <= s {
            lower.add(w);
        }
    }

    Ok((lower.value() / total.value()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_exact_values() {
        // sum_{i<=2} C(10,i) / 2^10 = (1 + 10 + 45) / 1024
        let p = binomial_tail_p(10, 0.5, 2).unwrap();
        assert!((p - 0.054_687_5).abs() < 1e-12);
        assert_eq!(binomial_tail_p(5, 0.2, 5).unwrap(), 1.0);
        let p = binomial_tail_p(20, 0.3, 0).unwrap();
        assert!((p - 0.7f64.powi(20)).abs() < 1e-12);
        assert!((p - 7.979_226_629_761_2e-4).abs() < 1e-12);
    }

    #[test]
    fn argument_errors() {
        assert_eq!(
            binomial_tail_p(5, 0.2, 6),
            Err(BinomialError::CountOutOfRange { s: 6, n: 5 })
        );
        assert!(binomial_tail_p(5, 0.2, -1).is_err());
        assert!(binomial_tail_p(0, 0.2, 0).is_err());
        assert!(binomial_tail_p(5, 0.0, 0).is_err());
        assert!(binomial_tail_p(5, 1.0, 0).is_err());
    }

    #[test]
    fn monotone_over_lattice() {
        for n in [1u64, 2, 7, 30, 101, 500] {
            let alphas: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
            for &a in &alphas {
                let mut prev = 0.0;
                for s in 0..=n as i64 {
                    let p = binomial_tail_p(n, a, s).unwrap();
                    assert!((0.0..=1.0).contains(&p));
                    assert!(p >= prev, "n={n} a={a} s={s}");
                    prev = p;
                }
            }
            for s in [0, n as i64 / 3, n as i64 / 2] {
                for w in alphas.windows(2) {
                    let lo = binomial_tail_p(n, w[0], s).unwrap();
                    let hi = binomial_tail_p(n, w[1], s).unwrap();
                    assert!(hi <= lo + 1e-14, "n={n} s={s} a={:?}", w);
                }
            }
        }
    }

    #[test]
    fn extreme_alpha_does_not_underflow_to_nan() {
        let p = binomial_tail_p(5000, 1e-6, 0).unwrap();
        assert!((p - (1.0f64 - 1e-6).powi(5000)).abs() < 1e-12);
        let p = binomial_tail_p(5000, 0.999_999, 4990).unwrap();
        assert!(p.is_finite() && p < 1e-10);
    }
}
