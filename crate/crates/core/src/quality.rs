//! Sequence quality, set confidence and conditional answer quality.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::GeneratedSequence;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QualityError {
    #[error("candidate list is empty")]
    EmptySet,
}

/// How answer-token log-probabilities are folded into one answer quality.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerQuality {
    /// exp(mean log-probability): per-token geometric mean probability.
    #[default]
    GeometricMean,
    /// exp(sum log-probability): raw joint probability of the answer.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub q: f64,
    pub a: f64,
}

impl QualityScores {
    pub fn of(seq: &GeneratedSequence, mode: AnswerQuality) -> Self {
        Self {
            q: sequence_quality(seq),
            a: answer_quality(seq, mode),
        }
    }
}

/// Length-normalized log-likelihood of the full generation.
pub fn sequence_quality(seq: &GeneratedSequence) -> f64 {
    let lps = seq.full_token_logprobs();
    lps.iter().sum::<f64>() / lps.len() as f64
}

/// Maximum sequence quality over the candidates.
pub fn set_confidence(candidates: &[GeneratedSequence]) -> Result<f64, QualityError> {
    candidates
        .iter()
        .map(sequence_quality)
        .reduce(f64::max)
        .ok_or(QualityError::EmptySet)
}

/// Probability of the answer given the generated reasoning, in [0, 1].
pub fn answer_quality(seq: &GeneratedSequence, mode: AnswerQuality) -> f64 {
    let lps = seq.answer_token_logprobs();
    let total: f64 = lps.iter().sum();
    let exponent = match mode {
        AnswerQuality::GeometricMean => total / lps.len() as f64,
        AnswerQuality::Joint => total,
    };
    exponent.exp().clamp(0.0, 1.0)
}

/// Highest-quality candidate; ties go to the smallest sample index.
pub fn best_candidate(
    candidates: &[GeneratedSequence],
) -> Result<&GeneratedSequence, QualityError> {
    let mut best: Option<(&GeneratedSequence, f64)> = None;
    for c in candidates {
        let q = sequence_quality(c);
        best = match best {
            Some((b, bq)) if bq > q || (bq == q && b.sample_index() <= c.sample_index()) => {
                Some((b, bq))
            }
            _ => Some((c, q)),
        };
    }
    best.map(|(b, _)| b).ok_or(QualityError::EmptySet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(full: Vec<f64>, ans: Vec<f64>, k: usize) -> GeneratedSequence {
        GeneratedSequence::new(vec!["s".into()], "a".into(), full, ans, k).unwrap()
    }

    fn with_q(q: f64, k: usize) -> GeneratedSequence {
        seq(vec![q], vec![-0.1], k)
    }

    #[test]
    fn sequence_quality_is_mean() {
        assert_eq!(sequence_quality(&seq(vec![-0.5, -1.5], vec![0.0], 1)), -1.0);
        assert_eq!(sequence_quality(&seq(vec![-2.0], vec![0.0], 1)), -2.0);
        assert_eq!(
            sequence_quality(&seq(vec![-1.0, -2.0, -3.0], vec![0.0], 1)),
            -2.0
        );
    }

    #[test]
    fn set_confidence_is_max() {
        assert_eq!(
            set_confidence(&[with_q(-1.0, 1), with_q(-2.0, 2)]).unwrap(),
            -1.0
        );
        assert_eq!(set_confidence(&[with_q(-0.3, 1)]).unwrap(), -0.3);
        assert_eq!(
            set_confidence(&[with_q(-5.0, 1), with_q(-5.0, 2)]).unwrap(),
            -5.0
        );
        assert_eq!(set_confidence(&[]), Err(QualityError::EmptySet));
    }

    #[test]
    fn answer_quality_values() {
        // exp(-0.1053605) = 0.89999999...
        let a = answer_quality(
            &seq(vec![-1.0], vec![-0.105_360_5], 1),
            AnswerQuality::GeometricMean,
        );
        assert!((a - 0.9).abs() < 1e-6);
        assert_eq!(
            answer_quality(&seq(vec![-1.0], vec![0.0], 1), AnswerQuality::GeometricMean),
            1.0
        );
        let ln2 = std::f64::consts::LN_2;
        let half = answer_quality(
            &seq(vec![-1.0], vec![-ln2, -ln2], 1),
            AnswerQuality::GeometricMean,
        );
        assert!((half - 0.5).abs() < 1e-12);
        let joint = answer_quality(&seq(vec![-1.0], vec![-ln2, -ln2], 1), AnswerQuality::Joint);
        assert!((joint - 0.25).abs() < 1e-12);
    }

    #[test]
    fn best_candidate_argmax_and_ties() {
        let c = [with_q(-2.0, 1), with_q(-1.0, 2)];
        assert_eq!(best_candidate(&c).unwrap().sample_index(), 2);
        let c = [with_q(-1.0, 1), with_q(-1.0, 2)];
        assert_eq!(best_candidate(&c).unwrap().sample_index(), 1);
        let c = [with_q(-1.0, 2), with_q(-1.0, 1)];
        assert_eq!(best_candidate(&c).unwrap().sample_index(), 1);
        let c = [with_q(-4.0, 3)];
        assert_eq!(best_candidate(&c).unwrap().sample_index(), 3);
        assert!(best_candidate(&[]).is_err());
    }

    proptest! {
        #[test]
        fn adding_a_candidate_never_lowers_confidence(
            qs in proptest::collection::vec(-10.0f64..0.0, 1..8),
            extra in -10.0f64..0.0,
        ) {
            let mut set: Vec<_> = qs.iter().enumerate().map(|(i, q)| with_q(*q, i + 1)).collect();
            let before = set_confidence(&set).unwrap();
            set.push(with_q(extra, set.len() + 1));
            prop_assert!(set_confidence(&set).unwrap() >= before);
        }

        #[test]
        fn scaling_logprobs_scales_scores(
            full in proptest::collection::vec(-5.0f64..0.0, 1..6),
            ans in proptest::collection::vec(-3.0f64..0.0, 1..4),
            c in 0.1f64..4.0,
        ) {
            let base = seq(full.clone(), ans.clone(), 1);
            let scaled = seq(
                full.iter().map(|x| x * c).collect(),
                ans.iter().map(|x| x * c).collect(),
                1,
            );
            let q0 = sequence_quality(&base);
            prop_assert!((sequence_quality(&scaled) - c * q0).abs() < 1e-9);
            let a0 = answer_quality(&base, AnswerQuality::GeometricMean);
            let a1 = answer_quality(&scaled, AnswerQuality::GeometricMean);
            prop_assert!((a1 - a0.powf(c)).abs() < 1e-9);
        }

        #[test]
        fn best_candidate_is_permutation_invariant(
            qs in proptest::collection::btree_set(-1000i32..0, 1..8),
            rot in 0usize..8,
        ) {
            let cands: Vec<_> = qs.iter().enumerate().map(|(i, q)| with_q(*q as f64 / 10.0, i + 1)).collect();
            let best = best_candidate(&cands).unwrap().sample_index();
            let mut rotated = cands.clone();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            rotated.reverse();
            prop_assert_eq!(best_candidate(&rotated).unwrap().sample_index(), best);
        }
    }
}
