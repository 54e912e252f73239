//! Certified Shapley attribution: Monte Carlo permutation estimates with
//! Hoeffding lower confidence bounds, greedy certified selection, and the
//! example-then-step driver.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::binomial::CompensatedSum;
use crate::data::Dataset;
use crate::evaluators::{canonical, CoalitionValue, PlayerId, ValueError};
use crate::seed::SeedTree;

/// Largest universe [`exact_shapley`] will enumerate.
pub const EXACT_MAX_PLAYERS: usize = 12;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("value function failed on coalition [{}]: {source}", join(coalition))]
    Value {
        coalition: Vec<PlayerId>,
        #[source]
        source: ValueError,
    },
    #[error("value {value} outside [0, 1] on coalition [{}]", join(coalition))]
    OutOfRange {
        coalition: Vec<PlayerId>,
        value: f64,
    },
    #[error("universe of {size} players exceeds the enumeration bound {max}")]
    UniverseTooLarge { size: usize, max: usize },
    #[error("base model does not fail on this target (v(empty) = {value})")]
    BaseModelCovers { value: f64 },
    #[error("player universe is empty")]
    EmptyUniverse,
    #[error("example `{0}` is not in the training set")]
    UnknownExample(String),
}

fn join(players: &[PlayerId]) -> String {
    players
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Example,
    Step,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Example => "example",
            Level::Step => "step",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerUniverse {
    pub level: Level,
    pub players: Vec<PlayerId>,
}

impl PlayerUniverse {
    pub fn new(level: Level, players: Vec<PlayerId>) -> Result<Self, AttributionError> {
        if canonical(&players).len() != players.len() {
            return Err(AttributionError::InvalidArgument(
                "duplicate player ids".into(),
            ));
        }
        if players
            .iter()
            .any(|p| p.step.is_some() != (level == Level::Step))
        {
            return Err(AttributionError::InvalidArgument(format!(
                "players do not match level `{level}`"
            )));
        }
        Ok(Self { level, players })
    }

    /// Every training example, in dataset order.
    pub fn examples(training: &Dataset) -> Self {
        Self {
            level: Level::Example,
            players: training.ids().map(PlayerId::example).collect(),
        }
    }

    /// Every reference step of the selected examples, in selection order.
    pub fn steps(training: &Dataset, selected: &[String]) -> Result<Self, AttributionError> {
        let mut players = Vec::new();
        for id in selected {
            let ex = training
                .get(id)
                .ok_or_else(|| AttributionError::UnknownExample(id.clone()))?;
            players.extend((1..=ex.reference_steps.len()).map(|s| PlayerId::step(id.clone(), s)));
        }
        if players.is_empty() {
            return Err(AttributionError::EmptyUniverse);
        }
        Self::new(Level::Step, players)
    }

    pub fn len(&self) -> usize {
        self.players.len()
    }

    pub fn is_empty(&self) -> bool {
        self.players.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerEstimate {
    pub player: PlayerId,
    pub phat: f64,
    pub lcb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    /// One row per player, in universe order.
    pub players: Vec<PlayerEstimate>,
    pub radius: f64,
    pub permutations: usize,
    pub delta: f64,
}

/// `2 * sqrt(ln(2 |P| / delta) / (2 M))`.
pub fn hoeffding_radius(
    m: usize,
    delta: f64,
    universe_size: usize,
) -> Result<f64, AttributionError> {
    if m == 0 {
        return Err(AttributionError::InvalidArgument(
            "M must be at least 1".into(),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AttributionError::InvalidArgument(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if universe_size == 0 {
        return Err(AttributionError::EmptyUniverse);
    }
    let log_term = (2.0 * universe_size as f64 / delta).ln();
    Ok(2.0 * (log_term / (2.0 * m as f64)).sqrt())
}

fn evaluate(value: &dyn CoalitionValue, coalition: &[PlayerId]) -> Result<f64, AttributionError> {
    let v = value
        .value(coalition)
        .map_err(|source| AttributionError::Value {
            coalition: coalition.to_vec(),
            source,
        })?;
    if !(0.0..=1.0).contains(&v) {
        return Err(AttributionError::OutOfRange {
            coalition: coalition.to_vec(),
            value: v,
        });
    }
    Ok(v)
}

/// Marginal contributions along one uniformly random ordering, indexed by
/// universe position. Evaluates `v` on each of the `n + 1` prefixes once.
fn permutation_marginals(
    value: &dyn CoalitionValue,
    players: &[PlayerId],
    stream: &SeedTree,
) -> Result<Vec<f64>, AttributionError> {
    let mut order: Vec<usize> = (0..players.len()).collect();
    order.shuffle(&mut stream.rng());
    let mut marginals = vec![0.0; players.len()];
    let mut coalition: Vec<PlayerId> = Vec::with_capacity(players.len());
    let mut prev = evaluate(value, &coalition)?;
    for i in order {
        let p = &players[i];
        let at = coalition.binary_search(p).unwrap_or_else(|e| e);
        coalition.insert(at, p.clone());
        let next = evaluate(value, &coalition)?;
        marginals[i] = next - prev;
        prev = next;
    }
    Ok(marginals)
}

/// Permutation Monte Carlo Shapley estimates from `m` orderings. Ordering
/// `j` shuffles with `stream/permutation:j`; orderings run in parallel and
/// are summed in index order, so results do not depend on scheduling.
pub fn mc_shapley(
    value: &dyn CoalitionValue,
    universe: &PlayerUniverse,
    m: usize,
    delta: f64,
    stream: &SeedTree,
) -> Result<ShapleyEstimate, AttributionError> {
    let radius = hoeffding_radius(m, delta, universe.len())?;
    let per_perm: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            permutation_marginals(
                value,
                &universe.players,
                &stream.derive("permutation", j as u64),
            )
        })
        .collect::<Result<_, _>>()?;
    let mut sums = vec![CompensatedSum::default(); universe.len()];
    for marginals in &per_perm {
        for (s, x) in sums.iter_mut().zip(marginals) {
            s.add(*x);
        }
    }
    let players = universe
        .players
        .iter()
        .zip(&sums)
        .map(|(p, s)| {
            let phat = s.value() / m as f64;
            PlayerEstimate {
                player: p.clone(),
                phat,
                lcb: phat - radius,
            }
        })
        .collect();
    Ok(ShapleyEstimate {
        players,
        radius,
        permutations: m,
        delta,
    })
}

/// Exact Shapley values by weighted summation over all coalitions, in
/// universe order.
pub fn exact_shapley(
    value: &dyn CoalitionValue,
    universe: &PlayerUniverse,
) -> Result<Vec<f64>, AttributionError> {
    let n = universe.len();
    if n > EXACT_MAX_PLAYERS {
        return Err(AttributionError::UniverseTooLarge {
            size: n,
            max: EXACT_MAX_PLAYERS,
        });
    }
    let values: Vec<f64> = (0..1usize << n)
        .map(|mask| {
            let coalition: Vec<PlayerId> = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| universe.players[i].clone())
                .collect();
            evaluate(value, &canonical(&coalition))
        })
        .collect::<Result<_, _>>()?;
    // weight of a coalition of size s not containing the player: s!(n-s-1)!/n!
    let weights: Vec<f64> = (0..n)
        .map(|s| 1.0 / (n as f64 * binomial(n - 1, s)))
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut acc = CompensatedSum::default();
            for mask in 0..1usize << n {
                if mask >> i & 1 == 0 {
                    let s = mask.count_ones() as usize;
                    acc.add(weights[s] * (values[mask | 1 << i] - values[mask]));
                }
            }
            acc.value()
        })
        .collect())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// All players, by LCB descending (ties by player id).
    pub order: Vec<PlayerId>,
    pub selected: Vec<PlayerId>,
    pub feasible: bool,
    pub cumulative_lcb: f64,
}

/// Shortest LCB-descending prefix whose LCB sum reaches `1 - alpha`. When
/// no prefix does, every player is returned and `feasible` is false.
pub fn certified_greedy(estimates: &[PlayerEstimate], alpha: f64) -> Selection {
    let mut ranked: Vec<&PlayerEstimate> = estimates.iter().collect();
    ranked.sort_by(|a, b| {
        b.lcb
            .total_cmp(&a.lcb)
            .then_with(|| a.player.cmp(&b.player))
    });
    let order: Vec<PlayerId> = ranked.iter().map(|e| e.player.clone()).collect();
    let target = 1.0 - alpha;
    let mut sum = 0.0;
    for (k, e) in ranked.iter().enumerate() {
        sum += e.lcb;
        if sum >= target {
            return Selection {
                selected: order[..=k].to_vec(),
                order,
                feasible: true,
                cumulative_lcb: sum,
            };
        }
    }
    Selection {
        selected: order.clone(),
        order,
        feasible: false,
        cumulative_lcb: sum,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub alpha: f64,
    #[serde(default = "default_permutations")]
    pub m_ex: usize,
    #[serde(default = "default_permutations")]
    pub m_st: usize,
    #[serde(default = "default_delta")]
    pub delta_ex: f64,
    #[serde(default = "default_delta")]
    pub delta_st: f64,
    /// Declared approximation slack; echoed, never estimated.
    #[serde(default)]
    pub xi_ex: f64,
    #[serde(default)]
    pub xi_st: f64,
    /// Group count for the warm start; `None` disables it.
    #[serde(default)]
    pub groups: Option<usize>,
    #[serde(default = "default_m0")]
    pub m0: usize,
    /// Re-evaluate the selected subset directly.
    #[serde(default = "default_true")]
    pub verify: bool,
}

fn default_permutations() -> usize {
    256
}

fn default_delta() -> f64 {
    0.25
}

fn default_m0() -> usize {
    32
}

fn default_true() -> bool {
    true
}

impl AttributionConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            m_ex: default_permutations(),
            m_st: default_permutations(),
            delta_ex: default_delta(),
            delta_st: default_delta(),
            xi_ex: 0.0,
            xi_st: 0.0,
            groups: None,
            m0: default_m0(),
            verify: true,
        }
    }

    pub fn validate(&self) -> Result<(), AttributionError> {
        let bad = |m: String| Err(AttributionError::InvalidArgument(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.m_ex == 0 || self.m_st == 0 || self.m0 == 0 {
            return bad("permutation counts must be at least 1".into());
        }
        for d in [self.delta_ex, self.delta_st] {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("delta must lie in (0, 1), got {d}"));
            }
        }
        if self.xi_ex < 0.0 || self.xi_st < 0.0 {
            return bad("xi must be non-negative".into());
        }
        if self.groups == Some(0) {
            return bad("groups must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub groups: Vec<Vec<PlayerId>>,
    /// Group-level permutation estimates.
    pub estimates: Vec<f64>,
    /// Whether adding the group ever turned the value to 1.
    pub flipped: Vec<bool>,
    /// Index of the retained group; `None` keeps the whole universe.
    pub chosen: Option<usize>,
    pub permutations: usize,
}

impl WarmStart {
    pub fn restricted(&self, universe: &PlayerUniverse) -> PlayerUniverse {
        match self.chosen {
            Some(g) => PlayerUniverse {
                level: universe.level,
                players: self.groups[g].clone(),
            },
            None => universe.clone(),
        }
    }
}

/// Splits `n` positions into `g` contiguous groups whose sizes differ by at
/// most one (larger groups first).
fn contiguous_groups(n: usize, g: usize) -> Vec<std::ops::Range<usize>> {
    let g = g.clamp(1, n.max(1));
    let (base, extra) = (n / g, n % g);
    let mut start = 0;
    (0..g)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Group-level preselection: a permutation estimate over `g` contiguous
/// groups, keeping the best-scoring group among those whose arrival was
/// observed to turn the value to 1. With no such group the full universe is
/// kept and a warning is logged.
pub fn group_warm_start(
    value: &dyn CoalitionValue,
    universe: &PlayerUniverse,
    g: usize,
    m0: usize,
    stream: &SeedTree,
) -> Result<WarmStart, AttributionError> {
    if g == 0 || m0 == 0 {
        return Err(AttributionError::InvalidArgument(
            "groups and m0 must be at least 1".into(),
        ));
    }
    if universe.is_empty() {
        return Err(AttributionError::EmptyUniverse);
    }
    let groups: Vec<Vec<PlayerId>> = contiguous_groups(universe.len(), g)
        .into_iter()
        .map(|r| universe.players[r].to_vec())
        .collect();
    if groups.len() == 1 {
        return Ok(WarmStart {
            estimates: vec![1.0],
            flipped: vec![true],
            chosen: Some(0),
            permutations: 0,
            groups,
        });
    }

    let runs: Vec<(Vec<f64>, Vec<bool>)> = (0..m0)
        .into_par_iter()
        .map(|j| {
            let mut order: Vec<usize> = (0..groups.len()).collect();
            order.shuffle(&mut stream.derive("group-permutation", j as u64).rng());
            let mut marginals = vec![0.0; groups.len()];
            let mut flips = vec![false; groups.len()];
            let mut coalition: Vec<PlayerId> = Vec::new();
            let mut prev = evaluate(value, &coalition)?;
            for gi in order {
                coalition = canonical(&[coalition, groups[gi].clone()].concat());
                let next = evaluate(value, &coalition)?;
                marginals[gi] = next - prev;
                flips[gi] = prev < 1.0 && next >= 1.0;
                prev = next;
            }
            Ok((marginals, flips))
        })
        .collect::<Result<_, AttributionError>>()?;

    let mut sums = vec![CompensatedSum::default(); groups.len()];
    let mut flipped = vec![false; groups.len()];
    for (marginals, flips) in &runs {
        for i in 0..groups.len() {
            sums[i].add(marginals[i]);
            flipped[i] |= flips[i];
        }
    }
    let estimates: Vec<f64> = sums.iter().map(|s| s.value() / m0 as f64).collect();
    let chosen = (0..groups.len())
        .filter(|&i| flipped[i])
        .min_by(|&a, &b| estimates[b].total_cmp(&estimates[a]).then(a.cmp(&b)));
    if chosen.is_none() {
        log::warn!(
            "warm start found no group that turns the value to 1; keeping all {} players",
            universe.len()
        );
    }
    Ok(WarmStart {
        groups,
        estimates,
        flipped,
        chosen,
        permutations: m0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub level: Level,
    pub alpha: f64,
    pub xi: f64,
    /// `alpha + xi`: the risk level the selection certifies.
    pub certified_risk: f64,
    pub estimate: ShapleyEstimate,
    pub order: Vec<PlayerId>,
    pub selected: Vec<PlayerId>,
    pub feasible: bool,
    pub cumulative_lcb: f64,
    /// `v(empty) = 0` was observed before estimation.
    pub base_model_failed: bool,
    /// Direct `v(selected)` when verification was requested.
    pub verification: Option<f64>,
    pub warm_start: Option<WarmStart>,
    pub stream: SeedTree,
}

impl AttributionReport {
    /// Example ids of the selection (deduplicated, selection order).
    pub fn selected_examples(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.selected {
            if !out.contains(&p.example) {
                out.push(p.example.clone());
            }
        }
        out
    }
}

fn check_base_failure(value: &dyn CoalitionValue) -> Result<(), AttributionError> {
    let v = evaluate(value, &[])?;
    if v != 0.0 {
        return Err(AttributionError::BaseModelCovers { value: v });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn explain(
    value: &dyn CoalitionValue,
    universe: PlayerUniverse,
    m: usize,
    delta: f64,
    xi: f64,
    cfg: &AttributionConfig,
    warm: bool,
    stream: &SeedTree,
) -> Result<AttributionReport, AttributionError> {
    cfg.validate()?;
    check_base_failure(value)?;
    let warm_start = match (warm, cfg.groups) {
        (true, Some(g)) => Some(group_warm_start(
            value,
            &universe,
            g,
            cfg.m0,
            &stream.derive("warm-start", 0),
        )?),
        _ => None,
    };
    let universe = match &warm_start {
        Some(w) => w.restricted(&universe),
        None => universe,
    };
    let estimate = mc_shapley(value, &universe, m, delta, &stream.derive("shapley", 0))?;
    let selection = certified_greedy(&estimate.players, cfg.alpha);
    let verification = if cfg.verify {
        Some(evaluate(value, &canonical(&selection.selected))?)
    } else {
        None
    };
    Ok(AttributionReport {
        level: universe.level,
        alpha: cfg.alpha,
        xi,
        certified_risk: cfg.alpha + xi,
        estimate,
        order: selection.order,
        selected: selection.selected,
        feasible: selection.feasible,
        cumulative_lcb: selection.cumulative_lcb,
        base_model_failed: true,
        verification,
        warm_start,
        stream: stream.clone(),
    })
}

/// Example-level attribution over every training example. Fails with
/// [`AttributionError::BaseModelCovers`] unless `v(empty) = 0`.
pub fn explain_examples(
    value: &dyn CoalitionValue,
    training: &Dataset,
    cfg: &AttributionConfig,
    stream: &SeedTree,
) -> Result<AttributionReport, AttributionError> {
    let universe = PlayerUniverse::examples(training);
    if universe.is_empty() {
        return Err(AttributionError::EmptyUniverse);
    }
    explain(
        value,
        universe,
        cfg.m_ex,
        cfg.delta_ex,
        cfg.xi_ex,
        cfg,
        true,
        &stream.derive("examples", 0),
    )
}

/// Step-level attribution over the reference steps of `selected`.
pub fn explain_steps(
    value: &dyn CoalitionValue,
    training: &Dataset,
    selected: &[String],
    cfg: &AttributionConfig,
    stream: &SeedTree,
) -> Result<AttributionReport, AttributionError> {
    let universe = PlayerUniverse::steps(training, selected)?;
    explain(
        value,
        universe,
        cfg.m_st,
        cfg.delta_st,
        cfg.xi_st,
        cfg,
        false,
        &stream.derive("steps", 0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluators::{Counting, FnValue, GameKind, SyntheticGame};

    fn universe(n: usize) -> PlayerUniverse {
        PlayerUniverse::new(
            Level::Example,
            (1..=n)
                .map(|i| PlayerId::example(format!("p{i}")))
                .collect(),
        )
        .unwrap()
    }

    fn game(n: usize, kind: GameKind) -> SyntheticGame {
        SyntheticGame::with_numbered_players(n, kind).unwrap()
    }

    fn est(lcbs: &[f64]) -> Vec<PlayerEstimate> {
        lcbs.iter()
            .enumerate()
            .map(|(i, &l)| PlayerEstimate {
                player: PlayerId::example(format!("p{i}")),
                phat: l,
                lcb: l,
            })
            .collect()
    }

    #[test]
    fn radius_values() {
        let r = hoeffding_radius(128, 0.5, 1).unwrap();
        assert!((r - 0.147_176_2).abs() < 1e-6);
        let r = hoeffding_radius(256, 0.25, 100).unwrap();
        assert!((r - 0.228_525).abs() < 1e-5);
        for m in [1, 7, 64, 1000] {
            let ratio =
                hoeffding_radius(4 * m, 0.1, 9).unwrap() / hoeffding_radius(m, 0.1, 9).unwrap();
            assert_eq!(ratio, 0.5);
        }
        assert!(hoeffding_radius(0, 0.1, 1).is_err());
        assert!(hoeffding_radius(1, 1.0, 1).is_err());
        assert!(hoeffding_radius(1, 0.1, 0).is_err());
    }

    #[test]
    fn radius_monotonicity() {
        let r = |m, d, n| hoeffding_radius(m, d, n).unwrap();
        assert!(r(100, 0.1, 5) > r(101, 0.1, 5));
        assert!(r(100, 0.1, 5) < r(100, 0.1, 6));
        assert!(r(100, 0.1, 5) < r(100, 0.05, 5));
    }

    #[test]
    fn dictator_is_exact_for_any_m() {
        let g = game(3, GameKind::Dictator { dictator: 0 });
        for m in [1, 5, 40] {
            let e = mc_shapley(&g, &universe(3), m, 0.25, &SeedTree::new(m as u64)).unwrap();
            let phat: Vec<f64> = e.players.iter().map(|p| p.phat).collect();
            assert_eq!(phat, vec![1.0, 0.0, 0.0]);
            assert_eq!(e.players[0].lcb, 1.0 - e.radius);
        }
    }

    #[test]
    fn evaluation_budget_is_m_times_n_plus_one() {
        let g = Counting::new(game(5, GameKind::Unanimity));
        mc_shapley(&g, &universe(5), 17, 0.25, &SeedTree::new(1)).unwrap();
        assert_eq!(g.calls(), 17 * 6);
    }

    #[test]
    fn mc_is_deterministic_under_parallelism() {
        let g = game(
            6,
            GameKind::WeightedVoting {
                weights: vec![3.0, 2.0, 2.0, 1.0, 1.0, 1.0],
                quota: 5.0,
            },
        );
        let a = mc_shapley(&g, &universe(6), 50, 0.25, &SeedTree::new(3)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| mc_shapley(&g, &universe(6), 50, 0.25, &SeedTree::new(3)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn exact_small_games() {
        let table = game(
            2,
            GameKind::Table {
                values: vec![0.0, 1.0, 0.0, 1.0],
            },
        );
        assert_eq!(exact_shapley(&table, &universe(2)).unwrap(), vec![1.0, 0.0]);
        let u = exact_shapley(&game(3, GameKind::Unanimity), &universe(3)).unwrap();
        for x in u {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = vec![0.1, 0.2, 0.3, 0.15];
        let add = exact_shapley(
            &game(4, GameKind::Additive { weights: w.clone() }),
            &universe(4),
        )
        .unwrap();
        for (a, b) in add.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_rejects_large_universe() {
        let g = game(13, GameKind::Unanimity);
        assert!(matches!(
            exact_shapley(&g, &universe(13)),
            Err(AttributionError::UniverseTooLarge { size: 13, .. })
        ));
    }

    #[test]
    fn value_failures_carry_the_coalition() {
        let g = game(2, GameKind::Unanimity);
        let bad = PlayerUniverse::new(Level::Example, vec![PlayerId::example("zz")]).unwrap();
        match mc_shapley(&g, &bad, 1, 0.25, &SeedTree::new(0)) {
            Err(AttributionError::Value { coalition, .. }) => {
                assert_eq!(coalition, vec![PlayerId::example("zz")])
            }
            other => panic!("unexpected {other:?}"),
        }
        let over = FnValue(|c: &[PlayerId]| c.len() as f64 * 2.0);
        assert!(matches!(
            mc_shapley(&over, &universe(2), 1, 0.25, &SeedTree::new(0)),
            Err(AttributionError::OutOfRange { .. })
        ));
    }

    #[test]
    fn greedy_cases() {
        let s = certified_greedy(&est(&[0.6, 0.3, 0.2]), 0.3);
        assert_eq!(s.selected.len(), 2);
        assert!(s.feasible);
        assert!((s.cumulative_lcb - 0.9).abs() < 1e-12);
        let s = certified_greedy(&est(&[0.8]), 0.3);
        assert_eq!(s.selected.len(), 1);
        let s = certified_greedy(&est(&[0.1, 0.1]), 0.3);
        assert!(!s.feasible);
        assert_eq!(s.selected.len(), 2);
    }

    #[test]
    fn greedy_sorts_and_breaks_ties_by_id() {
        let s = certified_greedy(&est(&[0.2, 0.5, 0.5]), 0.5);
        assert_eq!(
            s.order,
            vec![
                PlayerId::example("p1"),
                PlayerId::example("p2"),
                PlayerId::example("p0")
            ]
        );
        assert_eq!(s.selected, vec![PlayerId::example("p1")]);
    }

    #[test]
    fn contiguous_group_sizes() {
        let g = contiguous_groups(8, 3);
        assert_eq!(g, vec![0..3, 3..6, 6..8]);
        assert_eq!(contiguous_groups(2, 5).len(), 2);
        assert_eq!(contiguous_groups(4, 1), vec![0..4]);
    }

    #[test]
    fn warm_start_finds_planted_group() {
        let g = game(10, GameKind::Dictator { dictator: 4 });
        let w = group_warm_start(&g, &universe(10), 5, 8, &SeedTree::new(2)).unwrap();
        assert_eq!(w.chosen, Some(2));
        assert_eq!(
            w.restricted(&universe(10)).players,
            vec![PlayerId::example("p5"), PlayerId::example("p6")]
        );
    }

    #[test]
    fn warm_start_edge_cases() {
        let g = game(4, GameKind::Dictator { dictator: 1 });
        let w = group_warm_start(&g, &universe(4), 1, 8, &SeedTree::new(2)).unwrap();
        assert_eq!(w.restricted(&universe(4)), universe(4));
        let zero = game(
            4,
            GameKind::Additive {
                weights: vec![0.0; 4],
            },
        );
        let w = group_warm_start(&zero, &universe(4), 2, 8, &SeedTree::new(2)).unwrap();
        assert_eq!(w.chosen, None);
        assert_eq!(w.restricted(&universe(4)), universe(4));
    }

    #[test]
    fn explain_refuses_when_base_covers() {
        let covered = FnValue(|_: &[PlayerId]| 1.0);
        let training = crate::evaluators::planted_universe(3, 2, 1, 1, 2).training;
        assert!(matches!(
            explain_examples(&covered, &training, &AttributionConfig::new(0.3), &SeedTree::new(0)),
            Err(AttributionError::BaseModelCovers { value }) if value == 1.0
        ));
    }

    #[test]
    fn explain_constant_zero_is_infeasible() {
        let zero = FnValue(|_: &[PlayerId]| 0.0);
        let training = crate::evaluators::planted_universe(4, 2, 1, 1, 2).training;
        let r = explain_examples(
            &zero,
            &training,
            &AttributionConfig::new(0.3),
            &SeedTree::new(0),
        )
        .unwrap();
        assert!(!r.feasible);
        assert_eq!(r.selected.len(), 4);
        assert_eq!(r.verification, Some(0.0));
    }

    #[test]
    fn explain_steps_needs_steps() {
        let zero = FnValue(|_: &[PlayerId]| 0.0);
        let training = Dataset::new(
            crate::data::Role::Training,
            vec![crate::data::Example::new("a", "q", vec![], "1")],
        )
        .unwrap();
        assert!(matches!(
            explain_steps(
                &zero,
                &training,
                &["a".into()],
                &AttributionConfig::new(0.3),
                &SeedTree::new(0)
            ),
            Err(AttributionError::EmptyUniverse)
        ));
        assert!(matches!(
            explain_steps(
                &zero,
                &training,
                &["b".into()],
                &AttributionConfig::new(0.3),
                &SeedTree::new(0)
            ),
            Err(AttributionError::UnknownExample(_))
        ));
    }
}
