//! Sequence-generation backends.
//!
//! A backend turns an [`Example`] plus a seed stream into one sampled
//! reasoning trace and answer, together with two log-probability views: one
//! over every token of the full generation and one over the answer tokens
//! conditioned on the generated reasoning.

pub mod remote;
pub mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;
use crate::seed::SeedTree;

pub use remote::{RemoteBackend, RemoteConfig};
pub use sim::{CandidateLaw, DiscreteDist, SimProfile, SimulatedBackend};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("malformed backend response: missing field `{0}`")]
    MissingField(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("sample index {k} outside 1..={k_max}")]
    IndexOutOfRange { k: usize, k_max: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(#[from] SequenceError),
    #[error("invalid simulation profile: {0}")]
    InvalidProfile(String),
    #[error("sampling candidate {k} failed: {source}")]
    AtIndex {
        k: usize,
        #[source]
        source: Box<GenerationError>,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SequenceError {
    #[error("full_token_logprobs is empty")]
    EmptyFullLogprobs,
    #[error("answer_token_logprobs is empty")]
    EmptyAnswerLogprobs,
    #[error("log-probability {0} is not a finite value <= 0")]
    BadLogprob(f64),
    #[error("sample_index must be >= 1")]
    ZeroIndex,
}

/// A sampled reasoning trace plus answer. Constructed through
/// [`GeneratedSequence::new`], which enforces non-empty, finite, non-positive
/// log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSequence")]
pub struct GeneratedSequence {
    steps: Vec<String>,
    answer: String,
    full_token_logprobs: Vec<f64>,
    answer_token_logprobs: Vec<f64>,
    sample_index: usize,
}

#[derive(Deserialize)]
struct RawSequence {
    steps: Vec<String>,
    answer: String,
    full_token_logprobs: Vec<f64>,
    answer_token_logprobs: Vec<f64>,
    sample_index: usize,
}

impl TryFrom<RawSequence> for GeneratedSequence {
    type Error = SequenceError;

    fn try_from(raw: RawSequence) -> Result<Self, Self::Error> {
        GeneratedSequence::new(
            raw.steps,
            raw.answer,
            raw.full_token_logprobs,
            raw.answer_token_logprobs,
            raw.sample_index,
        )
    }
}

impl GeneratedSequence {
    pub fn new(
        steps: Vec<String>,
        answer: String,
        full_token_logprobs: Vec<f64>,
        answer_token_logprobs: Vec<f64>,
        sample_index: usize,
    ) -> Result<Self, SequenceError> {
        if full_token_logprobs.is_empty() {
            return Err(SequenceError::EmptyFullLogprobs);
        }
        if answer_token_logprobs.is_empty() {
            return Err(SequenceError::EmptyAnswerLogprobs);
        }
        if let Some(&bad) = full_token_logprobs
            .iter()
            .chain(&answer_token_logprobs)
            .find(|lp| !(lp.is_finite() && **lp <= 0.0))
        {
            return Err(SequenceError::BadLogprob(bad));
        }
        if sample_index == 0 {
            return Err(SequenceError::ZeroIndex);
        }
        Ok(Self {
            steps,
            answer,
            full_token_logprobs,
            answer_token_logprobs,
            sample_index,
        })
    }

    pub fn steps(&self) -> &[String] {
        &self.steps
    }

    pub fn answer(&self) -> &str {
        &self.answer
    }

    pub fn full_token_logprobs(&self) -> &[f64] {
        &self.full_token_logprobs
    }

    pub fn answer_token_logprobs(&self) -> &[f64] {
        &self.answer_token_logprobs
    }

    pub fn sample_index(&self) -> usize {
        self.sample_index
    }

    pub(crate) fn with_index(mut self, k: usize) -> Self {
        self.sample_index = k;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub k_max: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.2,
            top_p: 0.85,
            k_max: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if self.k_max == 0 {
            return Err("k_max must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    /// Whether the same (example, config, stream) always yields the same sequence.
    pub reproducible: bool,
    /// Whether answer log-probabilities come from a separate scoring call.
    pub two_phase_scoring: bool,
}

/// A generation policy identified by a model tag.
///
/// `sample` must thread the provided stream: equal inputs give equal outputs
/// unless [`Capabilities::reproducible`] is false.
pub trait GenerationBackend: Send + Sync {
    fn model_tag(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    /// Draws one candidate from `stream`. The returned sequence's
    /// `sample_index` is overwritten by [`sample_candidate`].
    fn sample(
        &self,
        example: &Example,
        config: &SamplerConfig,
        stream: &SeedTree,
    ) -> Result<GeneratedSequence, GenerationError>;
}

/// Samples the `k`-th candidate (1-based) for `example`. Candidate `k` always
/// reads the child stream `stream/candidate:k`.
pub fn sample_candidate(
    backend: &dyn GenerationBackend,
    example: &Example,
    config: &SamplerConfig,
    stream: &SeedTree,
    k: usize,
) -> Result<GeneratedSequence, GenerationError> {
    if k == 0 || k > config.k_max {
        return Err(GenerationError::IndexOutOfRange {
            k,
            k_max: config.k_max,
        });
    }
    let child = stream.derive("candidate", k as u64);
    let seq = backend.sample(example, config, &child)?;
    Ok(seq.with_index(k))
}

/// Exactly `k_max` candidates in sampling order.
pub fn sample_pool(
    backend: &dyn GenerationBackend,
    example: &Example,
    config: &SamplerConfig,
    stream: &SeedTree,
) -> Result<Vec<GeneratedSequence>, GenerationError> {
    (1..=config.k_max)
        .map(|k| {
            sample_candidate(backend, example, config, stream, k).map_err(|e| {
                GenerationError::AtIndex {
                    k,
                    source: Box::new(e),
                }
            })
        })
        .collect()
}
