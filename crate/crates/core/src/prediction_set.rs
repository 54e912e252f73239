//! Construction of the reasoning-answer prediction set.
//!
//! Candidates are sampled one at a time. A candidate is dropped when its
//! sequence quality is below `lambda1`; otherwise it joins the set, and the
//! loop stops as soon as the set confidence reaches `lambda2` and the best
//! member's answer quality reaches `lambda3`. The check runs only right after
//! an admission. [`replay_set`] runs the same control flow over a pre-sampled
//! pool, which lets one pool serve every threshold tuple of a grid.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;
use crate::generation::{
    sample_candidate, GeneratedSequence, GenerationBackend, GenerationError, SamplerConfig,
};
use crate::quality::{answer_quality, sequence_quality, AnswerQuality};
use crate::seed::SeedTree;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ThresholdError {
    #[error("lambda3 must lie in [0, 1], got {0}")]
    Lambda3OutOfRange(f64),
    #[error("thresholds must not be NaN")]
    NotANumber,
}

/// `(lambda1, lambda2, lambda3)`: quality floor for admission, set-confidence
/// floor and answer-quality floor for stopping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds")]
pub struct ThresholdTuple {
    #[serde(with = "crate::float_serde")]
    pub lambda1: f64,
    #[serde(with = "crate::float_serde")]
    pub lambda2: f64,
    #[serde(with = "crate::float_serde")]
    pub lambda3: f64,
}

#[derive(Deserialize)]
struct RawThresholds {
    #[serde(with = "crate::float_serde")]
    lambda1: f64,
    #[serde(with = "crate::float_serde")]
    lambda2: f64,
    #[serde(with = "crate::float_serde")]
    lambda3: f64,
}

impl TryFrom<RawThresholds> for ThresholdTuple {
    type Error = ThresholdError;

    fn try_from(raw: RawThresholds) -> Result<Self, Self::Error> {
        ThresholdTuple::new(raw.lambda1, raw.lambda2, raw.lambda3)
    }
}

impl ThresholdTuple {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self, ThresholdError> {
        if lambda1.is_nan() || lambda2.is_nan() || lambda3.is_nan() {
            return Err(ThresholdError::NotANumber);
        }
        if !(0.0..=1.0).contains(&lambda3) {
            return Err(ThresholdError::Lambda3OutOfRange(lambda3));
        }
        Ok(Self {
            lambda1,
            lambda2,
            lambda3,
        })
    }

    /// Order in which tuples become less conservative (more likely to miss):
    /// lower `lambda1` first, then higher `lambda2`, then higher `lambda3`.
    /// `Ordering::Less` means `self` is more conservative than `other`.
    pub fn conservative_cmp(&self, other: &Self) -> Ordering {
        self.lambda1
            .total_cmp(&other.lambda1)
            .then_with(|| other.lambda2.total_cmp(&self.lambda2))
            .then_with(|| other.lambda3.total_cmp(&self.lambda3))
    }

    /// Pointwise `<=` on all three components.
    pub fn dominated_by(&self, other: &Self) -> bool {
        self.lambda1 <= other.lambda1
            && self.lambda2 <= other.lambda2
            && self.lambda3 <= other.lambda3
    }
}

impl fmt::Display for ThresholdTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use crate::float_serde::display;
        write!(
            f,
            "({}, {}, {})",
            display(self.lambda1),
            display(self.lambda2),
            display(self.lambda3)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    CriteriaMet,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub members: Vec<GeneratedSequence>,
    pub stopped_at: usize,
    pub stop_reason: StopReason,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Incremental state of the sampling loop, shared by live construction and
/// replay so the two cannot drift apart.
#[derive(Debug)]
pub(crate) struct SetBuilder {
    lambda: ThresholdTuple,
    best_quality: f64,
    best_answer_quality: f64,
    members: Vec<usize>,
}

pub(crate) enum Step {
    Continue,
    Stop,
}

impl SetBuilder {
    pub(crate) fn new(lambda: ThresholdTuple) -> Self {
        Self {
            lambda,
            best_quality: f64::NEG_INFINITY,
            best_answer_quality: 0.0,
            members: Vec::new(),
        }
    }

    /// Feeds candidate `pos` with sequence quality `q`; `a` yields its answer
    /// quality and is only called when the candidate becomes the best member.
    pub(crate) fn offer(&mut self, pos: usize, q: f64, a: impl FnOnce() -> f64) -> Step {
        if q < self.lambda.lambda1 {
            return Step::Continue;
        }
        // earliest candidate wins ties
        if self.members.is_empty() || q > self.best_quality {
            self.best_quality = q;
            self.best_answer_quality = a();
        }
        self.members.push(pos);
        if self.best_quality >= self.lambda.lambda2
            && self.best_answer_quality >= self.lambda.lambda3
        {
            Step::Stop
        } else {
            Step::Continue
        }
    }

    pub(crate) fn members(&self) -> &[usize] {
        &self.members
    }

    pub(crate) fn into_members(self) -> Vec<usize> {
        self.members
    }
}

/// Builds the set by live sampling from `backend`.
pub fn construct_set(
    backend: &dyn GenerationBackend,
    example: &Example,
    lambda: &ThresholdTuple,
    cfg: &SamplerConfig,
    stream: &SeedTree,
    answer_mode: AnswerQuality,
) -> Result<PredictionSet, GenerationError> {
    let mut builder = SetBuilder::new(*lambda);
    let mut sampled: Vec<GeneratedSequence> = Vec::new();
    for k in 1..=cfg.k_max {
        let seq = sample_candidate(backend, example, cfg, stream, k).map_err(|e| {
            GenerationError::AtIndex {
                k,
                source: Box::new(e),
            }
        })?;
        let q = sequence_quality(&seq);
        let step = builder.offer(k - 1, q, || answer_quality(&seq, answer_mode));
        sampled.push(seq);
        if let Step::Stop = step {
            return Ok(finish(builder, sampled, k, StopReason::CriteriaMet));
        }
    }
    Ok(finish(
        builder,
        sampled,
        cfg.k_max,
        StopReason::BudgetExhausted,
    ))
}

fn finish(
    builder: SetBuilder,
    mut sampled: Vec<GeneratedSequence>,
    stopped_at: usize,
    stop_reason: StopReason,
) -> PredictionSet {
    let keep = builder.into_members();
    let mut keep_iter = keep.iter().peekable();
    let members = sampled
        .drain(..)
        .enumerate()
        .filter_map(|(i, s)| {
            if keep_iter.peek() == Some(&&i) {
                keep_iter.next();
                Some(s)
            } else {
                None
            }
        })
        .collect();
    PredictionSet {
        members,
        stopped_at,
        stop_reason,
    }
}

/// Re-executes the sampling loop over an already sampled pool.
pub fn replay_set(
    pool: &[GeneratedSequence],
    lambda: &ThresholdTuple,
    answer_mode: AnswerQuality,
) -> PredictionSet {
    let scores: Vec<f64> = pool.iter().map(sequence_quality).collect();
    let outcome = replay_scores(&scores, lambda, |i| answer_quality(&pool[i], answer_mode));
    PredictionSet {
        members: outcome.members.iter().map(|&i| pool[i].clone()).collect(),
        stopped_at: outcome.stopped_at,
        stop_reason: outcome.stop_reason,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ReplayOutcome {
    pub members: Vec<usize>,
    pub stopped_at: usize,
    pub stop_reason: StopReason,
}

/// Replay over precomputed sequence qualities.
pub(crate) fn replay_scores(
    qualities: &[f64],
    lambda: &ThresholdTuple,
    answer_quality_of: impl Fn(usize) -> f64,
) -> ReplayOutcome {
    let mut builder = SetBuilder::new(*lambda);
    for (i, &q) in qualities.iter().enumerate() {
        if let Step::Stop = builder.offer(i, q, || answer_quality_of(i)) {
            return ReplayOutcome {
                members: builder.into_members(),
                stopped_at: i + 1,
                stop_reason: StopReason::CriteriaMet,
            };
        }
    }
    debug_assert!(builder.members().len() <= qualities.len());
    ReplayOutcome {
        members: builder.into_members(),
        stopped_at: qualities.len(),
        stop_reason: StopReason::BudgetExhausted,
    }
}
