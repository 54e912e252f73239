//! Learn-then-test calibration of the threshold tuple.
//!
//! Each grid point is a hypothesis "risk exceeds alpha". Its failure count on
//! the calibration pools gives a binomial-tail p-value; a family-wise error
//! procedure turns the p-values into a valid set, and the valid tuple with the
//! smallest mean set size is deployed. An empty valid set is an abstention.

pub mod binomial;
pub mod split_conformal;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::{covers, AdmissionConfig};
use crate::data::{Dataset, Example};
use crate::generation::{
    sample_pool, GeneratedSequence, GenerationBackend, GenerationError, SamplerConfig,
};
use crate::prediction_set::{construct_set, replay_scores, StopReason, ThresholdTuple};
use crate::quality::{answer_quality, sequence_quality, AnswerQuality};
use crate::seed::SeedTree;

pub use binomial::{binomial_tail_p, BinomialError};
pub use split_conformal::{split_cp_quantile, SplitConformalError};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("calibration dataset is empty")]
    EmptyCalibration,
    #[error("{pools} candidate pools for {examples} calibration examples")]
    PoolCountMismatch { pools: usize, examples: usize },
    #[error("pool {index} has {len} candidates, expected k_max = {k_max}")]
    PoolLength {
        index: usize,
        len: usize,
        k_max: usize,
    },
    #[error(
        "backend failed on example `{example_id}` after {completed} of {total} examples: {source}"
    )]
    Backend {
        example_id: String,
        completed: usize,
        total: usize,
        #[source]
        source: GenerationError,
    },
    #[error("calibration abstained; no threshold tuple to deploy")]
    Abstained,
    #[error(transparent)]
    Binomial(#[from] BinomialError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FwerMethod {
    #[default]
    Bonferroni,
    FixedSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpec {
    Explicit(Vec<ThresholdTuple>),
    Product {
        #[serde(with = "crate::float_serde::seq")]
        lambda1_values: Vec<f64>,
        #[serde(with = "crate::float_serde::seq")]
        lambda2_values: Vec<f64>,
        #[serde(with = "crate::float_serde::seq")]
        lambda3_values: Vec<f64>,
    },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Product {
            lambda1_values: vec![-5.0, -4.0, -3.0, -2.0, -1.0],
            lambda2_values: vec![-4.0, -3.0, -2.0, -1.0, 0.0],
            lambda3_values: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

impl GridSpec {
    /// All tuples, in grid order (lambda1 outermost for products).
    pub fn tuples(&self) -> Result<Vec<ThresholdTuple>, CalibrationError> {
        let tuples = match self {
            GridSpec::Explicit(t) => t.clone(),
            GridSpec::Product {
                lambda1_values,
                lambda2_values,
                lambda3_values,
            } => {
                let mut out = Vec::new();
                for &l1 in lambda1_values {
                    for &l2 in lambda2_values {
                        for &l3 in lambda3_values {
                            out.push(
                                ThresholdTuple::new(l1, l2, l3)
                                    .map_err(|e| CalibrationError::InvalidConfig(e.to_string()))?,
                            );
                        }
                    }
                }
                out
            }
        };
        if tuples.is_empty() {
            return Err(CalibrationError::InvalidConfig("grid is empty".into()));
        }
        Ok(tuples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub fwer_method: FwerMethod,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub admission: AdmissionConfig,
    #[serde(default)]
    pub answer_quality: AnswerQuality,
}

fn default_epsilon() -> f64 {
    0.2
}

impl CalibrationConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            epsilon: default_epsilon(),
            grid: GridSpec::default(),
            fwer_method: FwerMethod::default(),
            sampler: SamplerConfig::default(),
            admission: AdmissionConfig::default(),
            answer_quality: AnswerQuality::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: String| Err(CalibrationError::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        self.sampler
            .validate()
            .map_err(CalibrationError::InvalidConfig)?;
        self.admission
            .validate()
            .map_err(CalibrationError::InvalidConfig)?;
        self.grid.tuples()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda: ThresholdTuple,
    pub failures: usize,
    pub empirical_risk: f64,
    pub mean_set_size: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEvaluation {
    pub n_cal: usize,
    pub alpha: f64,
    pub rows: Vec<GridRow>,
}

impl GridEvaluation {
    pub fn row(&self, lambda: &ThresholdTuple) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.lambda == *lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub valid_set: Vec<ThresholdTuple>,
    pub chosen: Option<ThresholdTuple>,
    pub abstained: bool,
    pub evaluations: GridEvaluation,
    pub config: CalibrationConfig,
    pub stream: SeedTree,
}

impl CalibrationOutcome {
    pub fn chosen_row(&self) -> Option<&GridRow> {
        self.chosen.as_ref().and_then(|l| self.evaluations.row(l))
    }
}

/// Per-candidate scores a pool needs for every replay.
struct ScoredPool {
    qualities: Vec<f64>,
    answer_qualities: Vec<f64>,
    covering: Vec<bool>,
}

impl ScoredPool {
    fn new(example: &Example, pool: &[GeneratedSequence], cfg: &CalibrationConfig) -> Self {
        Self {
            qualities: pool.iter().map(sequence_quality).collect(),
            answer_qualities: pool
                .iter()
                .map(|s| answer_quality(s, cfg.answer_quality))
                .collect(),
            covering: pool
                .iter()
                .map(|s| covers(example, s, &cfg.admission))
                .collect(),
        }
    }

    /// (loss, set size) under `lambda`.
    fn replay(&self, lambda: &ThresholdTuple) -> (bool, usize) {
        let out = replay_scores(&self.qualities, lambda, |i| self.answer_qualities[i]);
        let covered = out.members.iter().any(|&i| self.covering[i]);
        (!covered, out.members.len())
    }
}

/// Replays every pool under every grid tuple and tabulates failures, risk,
/// mean set size and binomial-tail p-values.
pub fn evaluate_grid(
    pools: &[Vec<GeneratedSequence>],
    cal: &Dataset,
    cfg: &CalibrationConfig,
) -> Result<GridEvaluation, CalibrationError> {
    if pools.len() != cal.len() {
        return Err(CalibrationError::PoolCountMismatch {
            pools: pools.len(),
            examples: cal.len(),
        });
    }
    if cal.is_empty() {
        return Err(CalibrationError::EmptyCalibration);
    }
    if let Some((index, p)) = pools
        .iter()
        .enumerate()
        .find(|(_, p)| p.len() != cfg.sampler.k_max)
    {
        return Err(CalibrationError::PoolLength {
            index,
            len: p.len(),
            k_max: cfg.sampler.k_max,
        });
    }
    let grid = cfg.grid.tuples()?;
    let scored: Vec<ScoredPool> = cal
        .examples
        .par_iter()
        .zip(pools.par_iter())
        .map(|(ex, pool)| ScoredPool::new(ex, pool, cfg))
        .collect();
    let n = cal.len();

    let rows = grid
        .par_iter()
        .map(|lambda| {
            let (failures, total_size) = scored.iter().fold((0usize, 0usize), |(f, s), pool| {
                let (loss, size) = pool.replay(lambda);
                (f + usize::from(loss), s + size)
            });
            let p_value = binomial_tail_p(n as u64, cfg.alpha, failures as i64)?;
            Ok(GridRow {
                lambda: *lambda,
                failures,
                empirical_risk: failures as f64 / n as f64,
                mean_set_size: total_size as f64 / n as f64,
                p_value,
            })
        })
        .collect::<Result<Vec<_>, CalibrationError>>()?;

    Ok(GridEvaluation {
        n_cal: n,
        alpha: cfg.alpha,
        rows,
    })
}

/// Bonferroni: reject every hypothesis with `p <= epsilon / m`.
pub fn bonferroni(p_values: &[f64], epsilon: f64) -> Vec<bool> {
    let threshold = epsilon / p_values.len().max(1) as f64;
    p_values.iter().map(|&p| p <= threshold).collect()
}

/// Fixed-sequence testing over `p_values` in the given order: rejects while
/// `p <= epsilon` and stops at the first failure. Returns how many were rejected.
pub fn fixed_sequence(p_values: &[f64], epsilon: f64) -> usize {
    p_values.iter().take_while(|&&p| p <= epsilon).count()
}

/// Valid set under family-wise error control at `epsilon`.
///
/// Fixed-sequence testing walks the grid from the most conservative tuple
/// (see [`ThresholdTuple::conservative_cmp`]). The returned tuples keep grid
/// order for Bonferroni and testing order for fixed-sequence.
pub fn fwer_select(
    evals: &GridEvaluation,
    epsilon: f64,
    method: FwerMethod,
) -> Vec<ThresholdTuple> {
    match method {
        FwerMethod::Bonferroni => {
            let ps: Vec<f64> = evals.rows.iter().map(|r| r.p_value).collect();
            evals
                .rows
                .iter()
                .zip(bonferroni(&ps, epsilon))
                .filter(|(_, keep)| *keep)
                .map(|(r, _)| r.lambda)
                .collect()
        }
        FwerMethod::FixedSequence => {
            let mut ordered: Vec<&GridRow> = evals.rows.iter().collect();
            ordered.sort_by(|a, b| a.lambda.conservative_cmp(&b.lambda));
            let ps: Vec<f64> = ordered.iter().map(|r| r.p_value).collect();
            let k = fixed_sequence(&ps, epsilon);
            ordered[..k].iter().map(|r| r.lambda).collect()
        }
    }
}

/// The valid tuple with the smallest mean calibration set size; ties go to
/// the more conservative tuple. `None` means abstention.
pub fn choose_lambda(valid: &[ThresholdTuple], evals: &GridEvaluation) -> Option<ThresholdTuple> {
    valid
        .iter()
        .filter_map(|l| evals.row(l).map(|r| (l, r.mean_set_size)))
        .min_by(|(la, sa), (lb, sb)| sa.total_cmp(sb).then_with(|| la.conservative_cmp(lb)))
        .map(|(l, _)| *l)
}

/// Samples one pool per calibration example, each from its own derived stream
/// `stream/cal-example:i`.
pub fn sample_calibration_pools(
    backend: &dyn GenerationBackend,
    cal: &Dataset,
    sampler: &SamplerConfig,
    stream: &SeedTree,
) -> Result<Vec<Vec<GeneratedSequence>>, CalibrationError> {
    let results: Vec<Result<Vec<GeneratedSequence>, GenerationError>> = cal
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            sample_pool(
                backend,
                ex,
                sampler,
                &stream.derive("cal-example", i as u64),
            )
        })
        .collect();
    let total = results.len();
    let mut pools = Vec::with_capacity(total);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => pools.push(p),
            Err(source) => {
                return Err(CalibrationError::Backend {
                    example_id: cal.examples[i].id.clone(),
                    completed: i,
                    total,
                    source,
                })
            }
        }
    }
    Ok(pools)
}

/// Runs the full calibration: sampling, grid evaluation, FWER selection and
/// the final choice.
pub fn calibrate(
    backend: &dyn GenerationBackend,
    cal: &Dataset,
    cfg: &CalibrationConfig,
    stream: &SeedTree,
) -> Result<CalibrationOutcome, CalibrationError> {
    cfg.validate()?;
    if cal.is_empty() {
        return Err(CalibrationError::EmptyCalibration);
    }
    let pools = sample_calibration_pools(backend, cal, &cfg.sampler, stream)?;
    calibrate_from_pools(&pools, cal, cfg, stream)
}

/// Calibration over pools sampled elsewhere.
pub fn calibrate_from_pools(
    pools: &[Vec<GeneratedSequence>],
    cal: &Dataset,
    cfg: &CalibrationConfig,
    stream: &SeedTree,
) -> Result<CalibrationOutcome, CalibrationError> {
    let evaluations = evaluate_grid(pools, cal, cfg)?;
    let valid_set = fwer_select(&evaluations, cfg.epsilon, cfg.fwer_method);
    let chosen = choose_lambda(&valid_set, &evaluations);
    Ok(CalibrationOutcome {
        abstained: chosen.is_none(),
        valid_set,
        chosen,
        evaluations,
        config: cfg.clone(),
        stream: stream.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub id: String,
    pub loss: u8,
    pub set_size: usize,
    pub stopped_at: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEvaluation {
    pub empirical_loss: f64,
    pub mean_set_size: f64,
    pub records: Vec<TestRecord>,
}

/// Live set construction on each test example under `lambda`; example `i`
/// samples from `stream/test-example:i`.
pub fn evaluate_test(
    backend: &dyn GenerationBackend,
    test: &Dataset,
    lambda: &ThresholdTuple,
    cfg: &CalibrationConfig,
    stream: &SeedTree,
) -> Result<TestEvaluation, CalibrationError> {
    let results: Vec<Result<TestRecord, GenerationError>> = test
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let set = construct_set(
                backend,
                ex,
                lambda,
                &cfg.sampler,
                &stream.derive("test-example", i as u64),
                cfg.answer_quality,
            )?;
            Ok(TestRecord {
                id: ex.id.clone(),
                loss: crate::admission::ra_loss(ex, &set.members, &cfg.admission),
                set_size: set.len(),
                stopped_at: set.stopped_at,
                stop_reason: set.stop_reason,
            })
        })
        .collect();
    let total = results.len();
    let mut records = Vec::with_capacity(total);
    for (i, r) in results.into_iter().enumerate() {
        records.push(r.map_err(|source| CalibrationError::Backend {
            example_id: test.examples[i].id.clone(),
            completed: i,
            total,
            source,
        })?);
    }
    let n = records.len().max(1) as f64;
    Ok(TestEvaluation {
        empirical_loss: records.iter().map(|r| r.loss as f64).sum::<f64>() / n,
        mean_set_size: records.iter().map(|r| r.set_size as f64).sum::<f64>() / n,
        records,
    })
}

/// [`evaluate_test`] with the tuple chosen by a calibration outcome.
pub fn evaluate_outcome(
    backend: &dyn GenerationBackend,
    test: &Dataset,
    outcome: &CalibrationOutcome,
    stream: &SeedTree,
) -> Result<TestEvaluation, CalibrationError> {
    let lambda = outcome.chosen.ok_or(CalibrationError::Abstained)?;
    evaluate_test(backend, test, &lambda, &outcome.config, stream)
}
