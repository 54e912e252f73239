//! Reasoning admission (ROUGE-L against the reference rationale), answer
//! matching, and the reasoning-answer loss.

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::generation::GeneratedSequence;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerNormalization {
    Exact,
    #[default]
    CasefoldTrim,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissionConfig {
    pub rouge_threshold: f64,
    #[serde(default)]
    pub answer_normalization: AnswerNormalization,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        Self {
            rouge_threshold: 0.2,
            answer_normalization: AnswerNormalization::default(),
        }
    }
}

impl AdmissionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.rouge_threshold) {
            return Err(format!(
                "rouge_threshold must lie in [0, 1], got {}",
                self.rouge_threshold
            ));
        }
        Ok(())
    }
}

/// Casefolded whitespace tokens with punctuation stripped at token edges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeL {
    pub lcs: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// ROUGE-L precision, recall and balanced F-measure.
pub fn rouge_l_scores<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeL {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return RougeL {
            lcs,
            precision: 0.0,
            recall: 0.0,
            f_measure: 0.0,
        };
    }
    let precision = lcs as f64 / candidate.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    // 2PR/(P+R) reduces to 2·LCS/(|c|+|r|); this form rounds once
    let f_measure = (2 * lcs) as f64 / (candidate.len() + reference.len()) as f64;
    RougeL {
        lcs,
        precision,
        recall,
        f_measure,
    }
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    rouge_l_scores(candidate, reference).f_measure
}

/// Admission predicate over a generated reasoning trace.
pub trait Admission: Send + Sync {
    fn admit(&self, example: &Example, seq: &GeneratedSequence) -> bool;
}

impl Admission for AdmissionConfig {
    fn admit(&self, example: &Example, seq: &GeneratedSequence) -> bool {
        admit(example, seq, self)
    }
}

/// 1 iff ROUGE-L of the trace against the reference rationale reaches the threshold.
pub fn admit(example: &Example, seq: &GeneratedSequence, cfg: &AdmissionConfig) -> bool {
    let cand = tokenize(&seq.steps().join(" "));
    let reference = tokenize(&example.reference_rationale());
    rouge_l(&cand, &reference) >= cfg.rouge_threshold
}

pub fn answer_match(candidate: &str, reference: &str, cfg: &AdmissionConfig) -> bool {
    match cfg.answer_normalization {
        AnswerNormalization::Exact => candidate == reference,
        AnswerNormalization::CasefoldTrim => {
            candidate.trim().to_lowercase() == reference.trim().to_lowercase()
        }
        AnswerNormalization::Numeric => {
            match (
                candidate.trim().parse::<f64>(),
                reference.trim().parse::<f64>(),
            ) {
                (Ok(a), Ok(b)) => a == b,
                _ => {
                    log::debug!("numeric answer match on unparseable operand: {candidate:?} vs {reference:?}");
                    false
                }
            }
        }
    }
}

/// Whether a single candidate is an admitted, answer-matching witness.
pub fn covers(example: &Example, seq: &GeneratedSequence, cfg: &AdmissionConfig) -> bool {
    answer_match(seq.answer(), &example.reference_answer, cfg) && admit(example, seq, cfg)
}

/// Reasoning-answer loss: 0 iff some member is admitted and matches the
/// reference answer; 1 otherwise (including the empty set).
pub fn ra_loss(
    example: &Example,
    prediction_set: &[GeneratedSequence],
    cfg: &AdmissionConfig,
) -> u8 {
    u8::from(!prediction_set.iter().any(|s| covers(example, s, cfg)))
}
