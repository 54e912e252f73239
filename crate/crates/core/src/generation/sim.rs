//! Deterministic simulated backend with a declared candidate law.
//!
//! Every candidate is drawn independently from a [`CandidateLaw`]: first its
//! kind (correct, unsupported, wrong answer), then a sequence-quality value and
//! an answer-confidence value from finite discrete distributions. Because the
//! law is finite, the exact miscoverage of any threshold tuple can be computed
//! by dynamic programming over the sampling loop ([`SimProfile::exact_risk`]).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Capabilities, GeneratedSequence, GenerationBackend, GenerationError, SamplerConfig};
use crate::admission::{self, AdmissionConfig};
use crate::data::Example;
use crate::prediction_set::ThresholdTuple;
use crate::quality::{self, AnswerQuality};
use crate::seed::SeedTree;

/// Reasoning text for unsupported candidates. Tokenizes to nothing, so it
/// shares no tokens with any reference.
const UNSUPPORTED_TRACE: &str = "\u{2205} \u{2205} \u{2205}";

/// Finite distribution over real values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDist {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn point(value: f64) -> Self {
        Self {
            values: vec![value],
            probs: vec![1.0],
        }
    }

    pub fn new(pairs: &[(f64, f64)]) -> Self {
        Self {
            values: pairs.iter().map(|p| p.0).collect(),
            probs: pairs.iter().map(|p| p.1).collect(),
        }
    }

    fn validate(&self, name: &str, accept: impl Fn(f64) -> bool) -> Result<(), GenerationError> {
        let bad = |msg: String| Err(GenerationError::InvalidProfile(format!("{name}: {msg}")));
        if self.values.is_empty() || self.values.len() != self.probs.len() {
            return bad("values and probs must be non-empty and of equal length".into());
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("probability {p} outside [0, 1]"));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("probabilities sum to {total}, not 1"));
        }
        if let Some(v) = self.values.iter().find(|v| !accept(**v)) {
            return bad(format!("value {v} out of range"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (v, p) in self.values.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *v;
            }
        }
        // rounding left a sliver of mass past the last cumulative value
        *self
            .values
            .iter()
            .zip(&self.probs)
            .rev()
            .find(|(_, p)| **p > 0.0)
            .map(|(v, _)| v)
            .unwrap_or(&self.values[self.values.len() - 1])
    }

    fn support(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values
            .iter()
            .copied()
            .zip(self.probs.iter().copied())
            .filter(|(_, p)| *p > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    /// Reference reasoning, reference answer.
    Correct,
    /// Reference answer without supporting reasoning.
    Unsupported,
    /// Reference reasoning, wrong answer.
    WrongAnswer,
}

/// Law of a single candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLaw {
    pub p_correct: f64,
    #[serde(default)]
    pub p_unsupported: f64,
    /// Per-token log-probability of correct candidates.
    pub good_quality: DiscreteDist,
    /// Per-token log-probability of all other candidates.
    pub bad_quality: DiscreteDist,
    /// Per-token answer probability of correct candidates.
    pub good_confidence: DiscreteDist,
    pub bad_confidence: DiscreteDist,
}

impl CandidateLaw {
    pub fn validate(&self) -> Result<(), GenerationError> {
        for (name, p) in [
            ("p_correct", self.p_correct),
            ("p_unsupported", self.p_unsupported),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GenerationError::InvalidProfile(format!(
                    "{name} = {p} outside [0, 1]"
                )));
            }
        }
        if self.p_correct + self.p_unsupported > 1.0 + 1e-12 {
            return Err(GenerationError::InvalidProfile(
                "p_correct + p_unsupported exceeds 1".into(),
            ));
        }
        let logprob = |v: f64| v.is_finite() && v <= 0.0;
        let prob = |v: f64| v > 0.0 && v <= 1.0;
        self.good_quality.validate("good_quality", logprob)?;
        self.bad_quality.validate("bad_quality", logprob)?;
        self.good_confidence.validate("good_confidence", prob)?;
        self.bad_confidence.validate("bad_confidence", prob)?;
        Ok(())
    }

    fn kind_probs(&self) -> [(CandidateKind, f64); 3] {
        [
            (CandidateKind::Correct, self.p_correct),
            (CandidateKind::Unsupported, self.p_unsupported),
            (
                CandidateKind::WrongAnswer,
                (1.0 - self.p_correct - self.p_unsupported).max(0.0),
            ),
        ]
    }

    fn dists(&self, kind: CandidateKind) -> (&DiscreteDist, &DiscreteDist) {
        match kind {
            CandidateKind::Correct => (&self.good_quality, &self.good_confidence),
            _ => (&self.bad_quality, &self.bad_confidence),
        }
    }

    /// Every candidate always correct, with high quality and confidence.
    pub fn perfect() -> Self {
        Self {
            p_correct: 1.0,
            p_unsupported: 0.0,
            good_quality: DiscreteDist::point(-0.5),
            bad_quality: DiscreteDist::point(-3.0),
            good_confidence: DiscreteDist::point(0.95),
            bad_confidence: DiscreteDist::point(0.3),
        }
    }

    /// No candidate is ever correct.
    pub fn hopeless() -> Self {
        Self {
            p_correct: 0.0,
            ..Self::perfect()
        }
    }
}

/// Declared generation law: a global default plus optional per-example overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    #[serde(default = "default_tag")]
    pub model_tag: String,
    pub law: CandidateLaw,
    #[serde(default)]
    pub per_example: BTreeMap<String, CandidateLaw>,
}

fn default_tag() -> String {
    "sim".to_owned()
}

/// One point of a candidate's finite outcome space.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub prob: f64,
    pub kind: CandidateKind,
    pub sequence_quality: f64,
    pub answer_quality: f64,
    pub covers: bool,
}

impl SimProfile {
    pub fn new(law: CandidateLaw) -> Self {
        Self {
            model_tag: default_tag(),
            law,
            per_example: BTreeMap::new(),
        }
    }

    pub fn perfect() -> Self {
        Self {
            model_tag: "sim:perfect".into(),
            ..Self::new(CandidateLaw::perfect())
        }
    }

    pub fn hopeless() -> Self {
        Self {
            model_tag: "sim:hopeless".into(),
            ..Self::new(CandidateLaw::hopeless())
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        self.law.validate()?;
        for (id, law) in &self.per_example {
            law.validate()
                .map_err(|e| GenerationError::InvalidProfile(format!("per_example[{id}]: {e}")))?;
        }
        Ok(())
    }

    pub fn law_for(&self, example: &Example) -> &CandidateLaw {
        self.per_example.get(&example.id).unwrap_or(&self.law)
    }

    /// Enumerates the finite outcome space of one candidate for `example`,
    /// scoring each outcome through the same quality and admission code the
    /// pipeline uses.
    pub fn outcomes(
        &self,
        example: &Example,
        admission_cfg: &AdmissionConfig,
        answer_mode: AnswerQuality,
    ) -> Vec<Outcome> {
        let law = self.law_for(example);
        let mut out = Vec::new();
        for (kind, pk) in law.kind_probs() {
            if pk <= 0.0 {
                continue;
            }
            let (qd, ad) = law.dists(kind);
            for (q, pq) in qd.support() {
                for (a, pa) in ad.support() {
                    let seq = build_candidate(example, kind, q, a, 1);
                    let covers = admission::admit(example, &seq, admission_cfg)
                        && admission::answer_match(
                            seq.answer(),
                            &example.reference_answer,
                            admission_cfg,
                        );
                    out.push(Outcome {
                        prob: pk * pq * pa,
                        kind,
                        sequence_quality: quality::sequence_quality(&seq),
                        answer_quality: quality::answer_quality(&seq, answer_mode),
                        covers,
                    });
                }
            }
        }
        out
    }

    /// Exact probability that the set built by the sampling loop under
    /// `lambda` misses every covering candidate, for i.i.d. candidates from
    /// this profile.
    pub fn exact_risk(
        &self,
        example: &Example,
        lambda: &ThresholdTuple,
        k_max: usize,
        admission_cfg: &AdmissionConfig,
        answer_mode: AnswerQuality,
    ) -> f64 {
        let outcomes = self.outcomes(example, admission_cfg, answer_mode);
        exact_risk_from_outcomes(&outcomes, lambda, k_max)
    }

    /// Mean exact risk over a population of examples.
    pub fn population_risk(
        &self,
        population: &[Example],
        lambda: &ThresholdTuple,
        k_max: usize,
        admission_cfg: &AdmissionConfig,
        answer_mode: AnswerQuality,
    ) -> f64 {
        if population.is_empty() {
            return f64::NAN;
        }
        let total: f64 = population
            .iter()
            .map(|ex| self.exact_risk(ex, lambda, k_max, admission_cfg, answer_mode))
            .sum();
        total / population.len() as f64
    }
}

/// Dynamic program over the sampling loop. State: index of the current best
/// admitted outcome (or none) and whether a covering candidate was admitted.
pub fn exact_risk_from_outcomes(
    outcomes: &[Outcome],
    lambda: &ThresholdTuple,
    k_max: usize,
) -> f64 {
    let n = outcomes.len();
    // slot 0 = empty set; slot 1 + i = best is outcome i
    let idx = |best: Option<usize>, good: bool| -> usize {
        let b = best.map_or(0, |i| i + 1);
        b * 2 + usize::from(good)
    };
    let mut mass = vec![0.0_f64; (n + 1) * 2];
    mass[idx(None, false)] = 1.0;
    let mut stopped_loss = 0.0;

    for _ in 0..k_max {
        let mut next = vec![0.0_f64; mass.len()];
        for (slot, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let best = match slot / 2 {
                0 => None,
                b => Some(b - 1),
            };
            let good = slot % 2 == 1;
            for (i, o) in outcomes.iter().enumerate() {
                let p = m * o.prob;
                if p == 0.0 {
                    continue;
                }
                if o.sequence_quality < lambda.lambda1 {
                    next[slot] += p;
                    continue;
                }
                let new_best = match best {
                    Some(b) if outcomes[b].sequence_quality >= o.sequence_quality => b,
                    _ => i,
                };
                let new_good = good || o.covers;
                let nb = &outcomes[new_best];
                if nb.sequence_quality >= lambda.lambda2 && nb.answer_quality >= lambda.lambda3 {
                    if !new_good {
                        stopped_loss += p;
                    }
                } else {
                    next[idx(Some(new_best), new_good)] += p;
                }
            }
        }
        mass = next;
    }
    let unfinished_loss: f64 = mass
        .iter()
        .enumerate()
        .filter(|(slot, _)| slot % 2 == 0)
        .map(|(_, m)| m)
        .sum();
    (stopped_loss + unfinished_loss).clamp(0.0, 1.0)
}

fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Materializes a candidate of the given kind whose every full-sequence token
/// has log-probability `quality` and every answer token has probability
/// `confidence`.
pub fn build_candidate(
    example: &Example,
    kind: CandidateKind,
    quality: f64,
    confidence: f64,
    k: usize,
) -> GeneratedSequence {
    let (steps, answer) = match kind {
        CandidateKind::Correct => (
            example.reference_steps.clone(),
            example.reference_answer.clone(),
        ),
        CandidateKind::Unsupported => (
            vec![UNSUPPORTED_TRACE.to_owned()],
            example.reference_answer.clone(),
        ),
        CandidateKind::WrongAnswer => (
            example.reference_steps.clone(),
            format!("not {}", example.reference_answer),
        ),
    };
    let answer_tokens = whitespace_tokens(&answer).max(1);
    let step_tokens: usize = steps.iter().map(|s| whitespace_tokens(s)).sum();
    let full_tokens = (step_tokens + answer_tokens).max(1);
    GeneratedSequence::new(
        steps,
        answer,
        vec![quality; full_tokens],
        vec![confidence.ln(); answer_tokens],
        k,
    )
    .expect("validated law produces valid sequences")
}

/// Backend whose candidate stream follows a [`SimProfile`] exactly.
#[derive(Debug, Clone)]
pub struct SimulatedBackend {
    profile: SimProfile,
}

impl SimulatedBackend {
    pub fn new(profile: SimProfile) -> Result<Self, GenerationError> {
        profile.validate()?;
        Ok(Self { profile })
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }
}

/// Free-function constructor mirroring [`SimulatedBackend::new`].
pub fn simulated_backend(profile: SimProfile) -> Result<SimulatedBackend, GenerationError> {
    SimulatedBackend::new(profile)
}

impl GenerationBackend for SimulatedBackend {
    fn model_tag(&self) -> &str {
        &self.profile.model_tag
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            reproducible: true,
            two_phase_scoring: false,
        }
    }

    fn sample(
        &self,
        example: &Example,
        _config: &SamplerConfig,
        stream: &SeedTree,
    ) -> Result<GeneratedSequence, GenerationError> {
        let law = self.profile.law_for(example);
        let mut rng = stream.rng();
        let u: f64 = rng.gen();
        let kind = if u < law.p_correct {
            CandidateKind::Correct
        } else if u < law.p_correct + law.p_unsupported {
            CandidateKind::Unsupported
        } else {
            CandidateKind::WrongAnswer
        };
        let (qd, ad) = law.dists(kind);
        let q = qd.sample(&mut rng);
        let a = ad.sample(&mut rng);
        Ok(build_candidate(example, kind, q, a, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{sample_candidate, sample_pool};

    fn example() -> Example {
        Example::new(
            "q1",
            "what is 2 + 3?",
            vec!["two plus three".into(), "equals five".into()],
            "5",
        )
    }

    #[test]
    fn emits_configured_answer_logprob() {
        let law = CandidateLaw {
            good_confidence: DiscreteDist::point(0.9),
            ..CandidateLaw::perfect()
        };
        let backend = SimulatedBackend::new(SimProfile::new(law)).unwrap();
        let seq = sample_candidate(
            &backend,
            &example(),
            &SamplerConfig::default(),
            &SeedTree::new(1),
            1,
        )
        .unwrap();
        assert_eq!(seq.answer(), "5");
        assert_eq!(seq.answer_token_logprobs().len(), 1);
        // ln(0.9) = -0.105360515657826...
        assert!((seq.answer_token_logprobs()[0] - (-0.105_360_515_657_826_3)).abs() < 1e-12);
    }

    #[test]
    fn repeated_calls_are_identical() {
        let backend = SimulatedBackend::new(SimProfile::new(CandidateLaw {
            p_correct: 0.4,
            p_unsupported: 0.2,
            good_quality: DiscreteDist::new(&[(-0.5, 0.5), (-1.5, 0.5)]),
            ..CandidateLaw::perfect()
        }))
        .unwrap();
        let cfg = SamplerConfig::default();
        let s = SeedTree::new(3);
        let a = sample_candidate(&backend, &example(), &cfg, &s, 1).unwrap();
        let b = sample_candidate(&backend, &example(), &cfg, &s, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pool_cardinality_and_order() {
        let backend = SimulatedBackend::new(SimProfile::perfect()).unwrap();
        let mut cfg = SamplerConfig::default();
        let pool = sample_pool(&backend, &example(), &cfg, &SeedTree::new(0)).unwrap();
        assert_eq!(pool.len(), 16);
        assert!(pool
            .windows(2)
            .all(|w| w[0].sample_index() < w[1].sample_index()));
        assert_eq!(pool[0].sample_index(), 1);
        cfg.k_max = 1;
        let pool = sample_pool(&backend, &example(), &cfg, &SeedTree::new(0)).unwrap();
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn distinct_streams_give_distinct_pools() {
        let backend = SimulatedBackend::new(SimProfile::new(CandidateLaw {
            p_correct: 0.5,
            p_unsupported: 0.25,
            good_quality: DiscreteDist::new(&[(-0.5, 0.5), (-1.5, 0.5)]),
            bad_quality: DiscreteDist::new(&[(-1.0, 0.5), (-2.0, 0.5)]),
            ..CandidateLaw::perfect()
        }))
        .unwrap();
        let cfg = SamplerConfig::default();
        let a = sample_pool(
            &backend,
            &example(),
            &cfg,
            &SeedTree::new(9).derive("example", 0),
        )
        .unwrap();
        let b = sample_pool(
            &backend,
            &example(),
            &cfg,
            &SeedTree::new(9).derive("example", 1),
        )
        .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn out_of_range_index_rejected() {
        let backend = SimulatedBackend::new(SimProfile::perfect()).unwrap();
        let cfg = SamplerConfig {
            k_max: 2,
            ..SamplerConfig::default()
        };
        assert!(matches!(
            sample_candidate(&backend, &example(), &cfg, &SeedTree::new(0), 3),
            Err(GenerationError::IndexOutOfRange { k: 3, k_max: 2 })
        ));
        assert!(sample_candidate(&backend, &example(), &cfg, &SeedTree::new(0), 0).is_err());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let mut law = CandidateLaw::perfect();
        law.p_correct = 1.5;
        assert!(SimulatedBackend::new(SimProfile::new(law)).is_err());
        let mut law = CandidateLaw::perfect();
        law.p_correct = 0.7;
        law.p_unsupported = 0.5;
        assert!(SimulatedBackend::new(SimProfile::new(law)).is_err());
        let mut law = CandidateLaw::perfect();
        law.good_confidence = DiscreteDist::point(0.0);
        assert!(SimulatedBackend::new(SimProfile::new(law)).is_err());
    }

    #[test]
    fn candidate_kinds_have_expected_content() {
        let ex = example();
        let good = build_candidate(&ex, CandidateKind::Correct, -1.0, 0.5, 1);
        assert_eq!(good.steps(), ex.reference_steps.as_slice());
        // 3 + 2 step tokens, 1 answer token
        assert_eq!(good.full_token_logprobs().len(), 6);
        let wrong = build_candidate(&ex, CandidateKind::WrongAnswer, -1.0, 0.5, 1);
        assert_eq!(wrong.answer(), "not 5");
        let cfg = AdmissionConfig::default();
        assert!(admission::admit(&ex, &wrong, &cfg));
        assert!(!admission::answer_match(wrong.answer(), "5", &cfg));
        let unsupported = build_candidate(&ex, CandidateKind::Unsupported, -1.0, 0.5, 1);
        assert!(!admission::admit(&ex, &unsupported, &cfg));
    }

    #[test]
    fn outcome_mass_sums_to_one() {
        let profile = SimProfile::new(CandidateLaw {
            p_correct: 0.3,
            p_unsupported: 0.2,
            good_quality: DiscreteDist::new(&[(-0.5, 0.25), (-1.5, 0.75)]),
            bad_quality: DiscreteDist::new(&[(-1.0, 0.5), (-2.0, 0.5)]),
            good_confidence: DiscreteDist::new(&[(0.9, 0.5), (0.4, 0.5)]),
            bad_confidence: DiscreteDist::point(0.3),
        });
        let total: f64 = profile
            .outcomes(
                &example(),
                &AdmissionConfig::default(),
                AnswerQuality::GeometricMean,
            )
            .iter()
            .map(|o| o.prob)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_risk_of_two_independent_draws() {
        // keep everything, never stop: miss iff both candidates fail
        let profile = SimProfile::new(CandidateLaw {
            p_correct: 0.5,
            ..CandidateLaw::perfect()
        });
        let lambda = ThresholdTuple::new(f64::NEG_INFINITY, f64::INFINITY, 0.0).unwrap();
        let r = profile.exact_risk(
            &example(),
            &lambda,
            2,
            &AdmissionConfig::default(),
            AnswerQuality::GeometricMean,
        );
        assert!((r - 0.25).abs() < 1e-15);
    }
}
