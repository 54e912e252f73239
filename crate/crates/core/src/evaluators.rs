//! Coalition value functions: synthetic games with known Shapley values, and
//! a toy retrainable scorer that runs the full retrain, recalibrate, evaluate
//! loop for every coalition.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{calibrate, evaluate_test, CalibrationConfig, CalibrationError};
use crate::data::{Dataset, Example, Role};
use crate::generation::{CandidateLaw, DiscreteDist, SimProfile, SimulatedBackend};
use crate::seed::SeedTree;

/// A player: a training example, or one reasoning step (1-based) of one.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlayerId {
    pub example: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

impl PlayerId {
    pub fn example(id: impl Into<String>) -> Self {
        Self {
            example: id.into(),
            step: None,
        }
    }

    pub fn step(id: impl Into<String>, index: usize) -> Self {
        Self {
            example: id.into(),
            step: Some(index),
        }
    }
}

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            None => write!(f, "{}", self.example),
            Some(s) => write!(f, "{}#{}", self.example, s),
        }
    }
}

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("unknown player `{0}`")]
    UnknownPlayer(PlayerId),
    #[error("coalition mixes example-level and step-level players")]
    MixedLevels,
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid game: {0}")]
    InvalidGame(String),
    #[error("calibration failed: {0}")]
    Calibration(#[from] CalibrationError),
}

/// `v(S)` for a coalition given in canonical (sorted, duplicate-free) order.
/// Implementations must be deterministic and return values in `[0, 1]`.
pub trait CoalitionValue: Send + Sync {
    fn value(&self, coalition: &[PlayerId]) -> Result<f64, ValueError>;
}

impl<T: CoalitionValue + ?Sized> CoalitionValue for &T {
    fn value(&self, coalition: &[PlayerId]) -> Result<f64, ValueError> {
        (**self).value(coalition)
    }
}

/// Sorted, duplicate-free copy of `players`.
pub fn canonical(players: &[PlayerId]) -> Vec<PlayerId> {
    let set: BTreeSet<&PlayerId> = players.iter().collect();
    set.into_iter().cloned().collect()
}

/// Adapts a closure into a value function.
pub struct FnValue<F>(pub F);

impl<F> CoalitionValue for FnValue<F>
where
    F: Fn(&[PlayerId]) -> f64 + Send + Sync,
{
    fn value(&self, coalition: &[PlayerId]) -> Result<f64, ValueError> {
        Ok((self.0)(coalition))
    }
}

/// Caches values on the canonical coalition key. Concurrent misses on the
/// same key may both evaluate; the first insert wins.
pub struct Memoized<V> {
    inner: V,
    cache: Mutex<HashMap<Vec<PlayerId>, f64>>,
}

impl<V: CoalitionValue> Memoized<V> {
    pub fn new(inner: V) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("memo cache poisoned").len()
    }

    pub fn inner(&self) -> &V {
        &self.inner
    }
}

impl<V: CoalitionValue> CoalitionValue for Memoized<V> {
    fn value(&self, coalition: &[PlayerId]) -> Result<f64, ValueError> {
        let key = canonical(coalition);
        if let Some(&v) = self.cache.lock().expect("memo cache poisoned").get(&key) {
            return Ok(v);
        }
        let v = self.inner.value(&key)?;
        self.cache
            .lock()
            .expect("memo cache poisoned")
            .entry(key)
            .or_insert(v);
        Ok(v)
    }
}

/// Counts calls that reach the wrapped function.
pub struct Counting<V> {
    inner: V,
    calls: AtomicUsize,
}

impl<V: CoalitionValue> Counting<V> {
    pub fn new(inner: V) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<V: CoalitionValue> CoalitionValue for Counting<V> {
    fn value(&self, coalition: &[PlayerId]) -> Result<f64, ValueError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.value(coalition)
    }
}

/// Games over players indexed `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameKind {
    /// `v(S) = 1` iff the dictator is in `S`.
    Dictator { dictator: usize },
    /// `v(S) = 1` iff `S` is the whole universe.
    Unanimity,
    /// `v(S) = sum of weights in S`; weights non-negative with sum at most 1.
    Additive { weights: Vec<f64> },
    /// `v(S) = 1` iff the weight of `S` reaches the quota.
    WeightedVoting { weights: Vec<f64>, quota: f64 },
    /// `v(S) = 1` iff `S` contains every planted player.
    PlantedSubset { planted: Vec<usize> },
    /// `v(S) = 1` iff `S` is non-empty.
    NonEmpty,
    /// Arbitrary game tabulated by coalition bitmask (bit `i` = player `i`).
    Table { values: Vec<f64> },
}

/// A synthetic game bound to concrete player ids.
#[derive(Debug, Clone)]
pub struct SyntheticGame {
    players: Vec<PlayerId>,
    index: HashMap<PlayerId, usize>,
    kind: GameKind,
}

impl SyntheticGame {
    pub fn new(players: Vec<PlayerId>, kind: GameKind) -> Result<Self, ValueError> {
        let n = players.len();
        let index: HashMap<PlayerId, usize> = players
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        if index.len() != n {
            return Err(ValueError::InvalidGame("duplicate player ids".into()));
        }
        let bad = |m: String| Err(ValueError::InvalidGame(m));
        match &kind {
            GameKind::Dictator { dictator } if *dictator >= n => {
                return bad(format!("dictator {dictator} outside 0..{n}"))
            }
            GameKind::Additive { weights } => {
                if weights.len() != n || weights.iter().any(|w| !(*w >= 0.0)) {
                    return bad("additive weights must be non-negative, one per player".into());
                }
                if weights.iter().sum::<f64>() > 1.0 + 1e-12 {
                    return bad("additive weights must sum to at most 1".into());
                }
            }
            GameKind::WeightedVoting { weights, .. } if weights.len() != n => {
                return bad("one voting weight per player required".into())
            }
            GameKind::PlantedSubset { planted } if planted.iter().any(|&p| p >= n) => {
                return bad("planted player out of range".into())
            }
            GameKind::Table { values } => {
                if n >= usize::BITS as usize || values.len() != 1usize << n {
                    return bad(format!("table needs 2^{n} entries"));
                }
                if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return bad("table values must lie in [0, 1]".into());
                }
            }
            _ => {}
        }
        Ok(Self {
            players,
            index,
            kind,
        })
    }

    /// Players named `p1..pn` at example level.
    pub fn with_numbered_players(n: usize, kind: GameKind) -> Result<Self, ValueError> {
        Self::new(
            (1..=n)
                .map(|i| PlayerId::example(format!("p{i}")))
                .collect(),
            kind,
        )
    }

    pub fn players(&self) -> &[PlayerId] {
        &self.players
    }

    pub fn kind(&self) -> &GameKind {
        &self.kind
    }

    fn members(&self, coalition: &[PlayerId]) -> Result<Vec<bool>, ValueError> {
        let mut member = vec![false; self.players.len()];
        for p in coalition {
            let i = *self
                .index
                .get(p)
                .ok_or_else(|| ValueError::UnknownPlayer(p.clone()))?;
            member[i] = true;
        }
        Ok(member)
    }

    fn value_of(&self, member: &[bool]) -> f64 {
        let indicator = |b: bool| if b { 1.0 } else { 0.0 };
        match &self.kind {
            GameKind::Dictator { dictator } => indicator(member[*dictator]),
            GameKind::Unanimity => indicator(member.iter().all(|&m| m)),
            GameKind::Additive { weights } => weights
                .iter()
                .zip(member)
                .filter(|(_, &m)| m)
                .map(|(w, _)| w)
                .sum::<f64>()
                .min(1.0),
            GameKind::WeightedVoting { weights, quota } => {
                let w: f64 = weights
                    .iter()
                    .zip(member)
                    .filter(|(_, &m)| m)
                    .map(|(w, _)| w)
                    .sum();
                indicator(w >= *quota)
            }
            GameKind::PlantedSubset { planted } => indicator(planted.iter().all(|&p| member[p])),
            GameKind::NonEmpty => indicator(member.iter().any(|&m| m)),
            GameKind::Table { values } => {
                let mask = member
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .fold(0usize, |acc, (i, _)| acc | (1 << i));
                values[mask]
            }
        }
    }

    /// Closed-form Shapley values, when the game has one.
    pub fn analytic_shapley(&self) -> Option<Vec<f64>> {
        let n = self.players.len();
        match &self.kind {
            GameKind::Dictator { dictator } => Some(
                (0..n)
                    .map(|i| if i == *dictator { 1.0 } else { 0.0 })
                    .collect(),
            ),
            GameKind::Unanimity | GameKind::NonEmpty => Some(vec![1.0 / n as f64; n]),
            GameKind::Additive { weights } => Some(weights.clone()),
            GameKind::PlantedSubset { planted } => {
                let set: BTreeSet<usize> = planted.iter().copied().collect();
                if set.is_empty() {
                    return Some(vec![0.0; n]);
                }
                let share = 1.0 / set.len() as f64;
                Some(
                    (0..n)
                        .map(|i| if set.contains(&i) { share } else { 0.0 })
                        .collect(),
                )
            }
            GameKind::WeightedVoting { .. } | GameKind::Table { .. } => None,
        }
    }
}

impl CoalitionValue for SyntheticGame {
    fn value(&self, coalition: &[PlayerId]) -> Result<f64, ValueError> {
        Ok(self.value_of(&self.members(coalition)?))
    }
}

/// Construction parameters of the toy retrainable scorer.
///
/// Skills are whitespace tokens starting with `#`. Training on a coalition
/// counts every skill occurrence in the retained reasoning steps; a query's
/// mastery is the weakest strength `1 - (1 - rate)^(epochs * count)` over the
/// skills it mentions (1 when it mentions none). The candidate law at a query
/// is the mastery-weighted blend of the novice and proficient laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorer {
    pub novice: CandidateLaw,
    pub proficient: CandidateLaw,
    pub learning_rate: f64,
    pub epochs: u32,
}

impl Default for ToyScorer {
    fn default() -> Self {
        Self {
            novice: CandidateLaw::hopeless(),
            proficient: CandidateLaw::perfect(),
            learning_rate: 1.0,
            epochs: 1,
        }
    }
}

fn skills(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
        .filter(|t| t.len() > 1 && t.starts_with('#'))
}

fn mix(a: &DiscreteDist, b: &DiscreteDist, w: f64) -> DiscreteDist {
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (v, p) in a.values.iter().zip(&a.probs) {
        pairs.push((*v, (1.0 - w) * p));
    }
    for (v, p) in b.values.iter().zip(&b.probs) {
        pairs.push((*v, w * p));
    }
    pairs.retain(|(_, p)| *p > 0.0);
    DiscreteDist::new(&pairs)
}

impl ToyScorer {
    /// Skill counts learned from the given reasoning steps.
    pub fn train<'a>(steps: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        for step in steps {
            for s in skills(step) {
                *counts.entry(s.to_owned()).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn mastery(&self, counts: &BTreeMap<String, u64>, query: &str) -> f64 {
        skills(query)
            .map(|s| {
                let c = counts.get(s).copied().unwrap_or(0);
                let exposures = self.epochs as f64 * c as f64;
                1.0 - (1.0 - self.learning_rate).powf(exposures)
            })
            .fold(1.0, f64::min)
    }

    pub fn law(&self, mastery: f64) -> CandidateLaw {
        let (n, p, w) = (&self.novice, &self.proficient, mastery);
        if w <= 0.0 {
            return n.clone();
        }
        if w >= 1.0 {
            return p.clone();
        }
        CandidateLaw {
            p_correct: (1.0 - w) * n.p_correct + w * p.p_correct,
            p_unsupported: (1.0 - w) * n.p_unsupported + w * p.p_unsupported,
            good_quality: mix(&n.good_quality, &p.good_quality, w),
            bad_quality: mix(&n.bad_quality, &p.bad_quality, w),
            good_confidence: mix(&n.good_confidence, &p.good_confidence, w),
            bad_confidence: mix(&n.bad_confidence, &p.bad_confidence, w),
        }
    }
}

/// Retrains the toy scorer on each coalition, recalibrates on a fixed
/// calibration set with fresh coalition-keyed randomness, and reports
/// whether the calibrated set covers the target. Abstention scores 0.
///
/// Example-level players train on whole examples; step-level players train
/// only on the listed steps of their examples. The empty coalition is the
/// untrained base scorer.
pub struct ToyRetrainEvaluator {
    training: Dataset,
    calibration: Dataset,
    target: Example,
    config: CalibrationConfig,
    scorer: ToyScorer,
    stream: SeedTree,
}

impl ToyRetrainEvaluator {
    pub fn new(
        training: Dataset,
        calibration: Dataset,
        target: Example,
        config: CalibrationConfig,
        scorer: ToyScorer,
        stream: SeedTree,
    ) -> Result<Self, ValueError> {
        config.validate()?;
        if calibration.is_empty() {
            return Err(CalibrationError::EmptyCalibration.into());
        }
        Ok(Self {
            training,
            calibration,
            target,
            config,
            scorer,
            stream,
        })
    }

    pub fn training(&self) -> &Dataset {
        &self.training
    }

    pub fn calibration(&self) -> &Dataset {
        &self.calibration
    }

    pub fn target(&self) -> &Example {
        &self.target
    }

    pub fn config(&self) -> &CalibrationConfig {
        &self.config
    }

    /// Randomness for one coalition, keyed by its canonical encoding.
    pub fn coalition_stream(&self, coalition: &[PlayerId]) -> SeedTree {
        let label: Vec<String> = canonical(coalition).iter().map(|p| p.to_string()).collect();
        self.stream
            .derive("coalition", 0)
            .derive(&label.join(","), 0)
    }

    fn training_steps(&self, coalition: &[PlayerId]) -> Result<Vec<&str>, ValueError> {
        let step_level = coalition.first().is_some_and(|p| p.step.is_some());
        let mut steps = Vec::new();
        for p in coalition {
            if p.step.is_some() != step_level {
                return Err(ValueError::MixedLevels);
            }
            let ex = self
                .training
                .get(&p.example)
                .ok_or_else(|| ValueError::UnknownPlayer(p.clone()))?;
            match p.step {
                None => steps.extend(ex.reference_steps.iter().map(String::as_str)),
                Some(s) => {
                    let step = s
                        .checked_sub(1)
                        .and_then(|i| ex.reference_steps.get(i))
                        .ok_or_else(|| ValueError::UnknownPlayer(p.clone()))?;
                    steps.push(step.as_str());
                }
            }
        }
        Ok(steps)
    }

    /// The generation backend after retraining on `coalition`.
    pub fn trained_backend(&self, coalition: &[PlayerId]) -> Result<SimulatedBackend, ValueError> {
        let counts = ToyScorer::train(self.training_steps(coalition)?);
        let law_at = |ex: &Example| self.scorer.law(self.scorer.mastery(&counts, &ex.query));
        let mut profile = SimProfile::new(self.scorer.proficient.clone());
        profile.model_tag = "toy".into();
        for ex in self
            .calibration
            .examples
            .iter()
            .chain(std::iter::once(&self.target))
        {
            profile.per_example.insert(ex.id.clone(), law_at(ex));
        }
        SimulatedBackend::new(profile).map_err(|e| ValueError::InvalidGame(e.to_string()))
    }

    /// Loss at the target (`None` on abstention) after retraining on
    /// `coalition`, using the same streams as [`CoalitionValue::value`].
    pub fn target_loss(&self, coalition: &[PlayerId]) -> Result<Option<u8>, ValueError> {
        let coalition = canonical(coalition);
        let backend = self.trained_backend(&coalition)?;
        let stream = self.coalition_stream(&coalition);
        let outcome = calibrate(
            &backend,
            &self.calibration,
            &self.config,
            &stream.derive("calibration", 0),
        )?;
        let Some(lambda) = outcome.chosen else {
            return Ok(None);
        };
        let target = Dataset::new(Role::Test, vec![self.target.clone()])
            .expect("single example has unique id");
        let eval = evaluate_test(
            &backend,
            &target,
            &lambda,
            &self.config,
            &stream.derive("target", 0),
        )?;
        Ok(Some(eval.records[0].loss))
    }
}

impl CoalitionValue for ToyRetrainEvaluator {
    fn value(&self, coalition: &[PlayerId]) -> Result<f64, ValueError> {
        Ok(match self.target_loss(coalition)? {
            Some(loss) => 1.0 - loss as f64,
            None => 0.0,
        })
    }
}

/// A training/calibration/target triple where exactly one training example
/// teaches the skill the target needs, and only one of its steps carries it.
#[derive(Debug, Clone)]
pub struct PlantedUniverse {
    pub training: Dataset,
    pub calibration: Dataset,
    pub target: Example,
    pub pivotal_example: String,
    pub pivotal_step: usize,
}

/// `n_examples` training examples of `steps_each` steps; example
/// `pivotal_example` (1-based) mentions `#carry` in step `pivotal_step`.
pub fn planted_universe(
    n_examples: usize,
    steps_each: usize,
    pivotal_example: usize,
    pivotal_step: usize,
    n_cal: usize,
) -> PlantedUniverse {
    assert!((1..=n_examples).contains(&pivotal_example));
    assert!((1..=steps_each).contains(&pivotal_step));
    let training = (1..=n_examples)
        .map(|e| {
            let steps = (1..=steps_each)
                .map(|s| {
                    if e == pivotal_example && s == pivotal_step {
                        format!("add the ones column and #carry the ten into column {s}")
                    } else {
                        format!("example {e} step {s} restates the digits #read")
                    }
                })
                .collect();
            Example::new(
                format!("e{e}"),
                format!("what is {e} plus {e}?"),
                steps,
                (2 * e).to_string(),
            )
        })
        .collect();
    let calibration = (1..=n_cal)
        .map(|i| {
            Example::new(
                format!("c{i}"),
                format!("what is {i} times one?"),
                vec![format!("{i} times one is {i}"), "nothing to carry".into()],
                i.to_string(),
            )
        })
        .collect();
    let target = Example::new(
        "t1",
        "what is 27 plus 15? #carry",
        vec![
            "seven plus five is twelve".into(),
            "write two and carry one".into(),
            "two plus one plus one is four".into(),
        ],
        "42",
    );
    PlantedUniverse {
        training: Dataset::new(Role::Training, training).expect("unique ids"),
        calibration: Dataset::new(Role::Calibration, calibration).expect("unique ids"),
        target,
        pivotal_example: format!("e{pivotal_example}"),
        pivotal_step,
    }
}
