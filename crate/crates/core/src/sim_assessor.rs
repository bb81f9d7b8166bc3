//! Synthetic judges for offline runs of the whole pipeline.
//!
//! Each query has a hidden quality order over its items. A simulated judge
//! reports the better item with probability `1 - epsilon`, independently per
//! pair. Every draw is addressed by `(seed, pair_id)`, so a campaign is
//! reproducible and two campaigns at different `epsilon` but the same seed
//! share their underlying uniforms.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{build_preference_qrels, Mode, PreferenceQrels};
use crate::corpus::{QrelSet, Run};
use crate::ids::{ItemId, QueryId};
use crate::judgment_log::{PairKind, PreferenceJudgment, PreferenceSet};
use crate::pooling::{build_pools, Pools};
use crate::seed;
use crate::tasking::{pool_pairs, JudgmentPair, Side, Task};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("epsilon must be in [0, 0.5], got {0}")]
    EpsilonOutOfRange(f64),
    #[error("item {item} is not in the latent order for query {query}")]
    UnknownItem { query: QueryId, item: ItemId },
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    epsilon: f64,
    qc_epsilon: f64,
}

impl NoiseModel {
    /// QC pairs default to error-free.
    pub fn new(epsilon: f64) -> Result<Self, SimError> {
        Ok(NoiseModel {
            epsilon: check_epsilon(epsilon)?,
            qc_epsilon: 0.0,
        })
    }

    pub fn with_qc_epsilon(mut self, qc_epsilon: f64) -> Result<Self, SimError> {
        self.qc_epsilon = check_epsilon(qc_epsilon)?;
        Ok(self)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn qc_epsilon(&self) -> f64 {
        self.qc_epsilon
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            epsilon: 0.33,
            qc_epsilon: 0.0,
        }
    }
}

fn check_epsilon(e: f64) -> Result<f64, SimError> {
    if (0.0..=0.5).contains(&e) {
        Ok(e)
    } else {
        Err(SimError::EpsilonOutOfRange(e))
    }
}

/// Per-query strict total order, best first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentOrder {
    pub orders: BTreeMap<QueryId, Vec<ItemId>>,
    pub seed: u64,
}

impl LatentOrder {
    /// A uniformly random order over each pool's members.
    pub fn random(pools: &Pools, seed: u64) -> Self {
        let orders = pools
            .values()
            .map(|pool| {
                let mut items: Vec<ItemId> = pool.members.iter().cloned().collect();
                items.shuffle(&mut seed::rng(seed, &format!("latent/{}", pool.query)));
                (pool.query.clone(), items)
            })
            .collect();
        LatentOrder { orders, seed }
    }

    /// 0 is best.
    pub fn position(&self, query: &QueryId, item: &ItemId) -> Option<usize> {
        self.orders.get(query)?.iter().position(|i| i == item)
    }

    pub fn best(&self, query: &QueryId) -> Option<&ItemId> {
        self.orders.get(query)?.first()
    }

    /// The same orders restricted to pool members.
    pub fn restrict(&self, pools: &Pools) -> LatentOrder {
        let orders = pools
            .values()
            .filter_map(|pool| {
                let order = self.orders.get(&pool.query)?;
                let kept: Vec<ItemId> = order.iter().filter(|i| pool.contains(i)).cloned().collect();
                Some((pool.query.clone(), kept))
            })
            .collect();
        LatentOrder {
            orders,
            seed: self.seed,
        }
    }

    /// Latent-best item per query.
    pub fn maxima(&self) -> BTreeMap<QueryId, ItemId> {
        self.orders
            .iter()
            .filter_map(|(q, o)| o.first().map(|b| (q.clone(), b.clone())))
            .collect()
    }
}

fn latent_better<'a>(
    latent: &LatentOrder,
    query: &QueryId,
    a: &'a ItemId,
    b: &'a ItemId,
) -> Result<(&'a ItemId, &'a ItemId), SimError> {
    let pos = |item: &ItemId| {
        latent.position(query, item).ok_or_else(|| SimError::UnknownItem {
            query: query.clone(),
            item: item.clone(),
        })
    };
    Ok(if pos(a)? < pos(b)? { (a, b) } else { (b, a) })
}

/// One simulated judgment, deterministic in `(pair_id, seed)`.
pub fn judge(pair: &JudgmentPair, latent: &LatentOrder, noise: &NoiseModel, seed: u64) -> Result<PreferenceJudgment, SimError> {
    let (good, bad, eps) = match pair.kind {
        PairKind::Real => {
            let (g, b) = latent_better(latent, &pair.query, &pair.left, &pair.right)?;
            (g, b, noise.epsilon)
        }
        PairKind::Qc => {
            let (relevant, distractor) = pair.canonical();
            (relevant, distractor, noise.qc_epsilon)
        }
    };
    let err = seed::unit(seed, &pair.pair_id) < eps;
    let (winner, loser) = if err { (bad, good) } else { (good, bad) };
    Ok(PreferenceJudgment {
        query: pair.query.clone(),
        winner: winner.clone(),
        loser: loser.clone(),
        assessor: format!("sim-{seed:x}"),
        task_id: "simulated".to_string(),
        timestamp: 0,
        kind: pair.kind,
        replica: pair.replica,
    })
}

/// Judges every unordered pool pair once.
pub fn simulate_campaign(pools: &Pools, latent: &LatentOrder, noise: &NoiseModel, seed: u64) -> Result<PreferenceSet, SimError> {
    let pairs = pool_pairs(pools);
    let judgments: Vec<PreferenceJudgment> = pairs
        .par_iter()
        .map(|p| judge(p, latent, noise, seed))
        .collect::<Result<_, _>>()?;
    Ok(PreferenceSet::from_judgments(judgments))
}

/// Answer strategies for a whole task.
#[derive(Debug, Clone)]
pub enum SimulatedAssessor {
    /// Follows the latent order with noise.
    Noisy { latent: LatentOrder, noise: NoiseModel },
    /// Picks a side uniformly at random for every pair.
    Guesser,
}

impl SimulatedAssessor {
    pub fn answer(&self, task: &Task, seed: u64) -> Result<BTreeMap<String, Side>, SimError> {
        let mut out = BTreeMap::new();
        for p in &task.pairs {
            let label = format!("{}/{}/{}", task.task_id, task.attempt, p.pair_id);
            let side = match self {
                SimulatedAssessor::Guesser => {
                    if seed::rng(seed, &label).gen_bool(0.5) {
                        Side::Left
                    } else {
                        Side::Right
                    }
                }
                SimulatedAssessor::Noisy { latent, noise } => {
                    let j = judge(p, latent, noise, seed::derive(seed, &label))?;
                    if j.winner == p.left {
                        Side::Left
                    } else {
                        Side::Right
                    }
                }
            };
            out.insert(p.pair_id.clone(), side);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

/// Which universe item becomes the incumbent qrel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QrelPolicy {
    /// Latent-worst item.
    #[default]
    Worst,
    /// Uniform among items that are not latent-best.
    NonMax,
    /// Uniform over the universe.
    Random,
}

/// Scenario file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub queries: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Distinct candidate top items per query; controls pool sizes.
    #[serde(default = "default_candidates")]
    pub candidates: SizeRange,
    #[serde(default = "default_depth")]
    pub ranking_depth: usize,
    /// Probability a run puts the latent-best candidate first.
    #[serde(default = "default_skill")]
    pub run_skill: f64,
    #[serde(default)]
    pub qrel_policy: QrelPolicy,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub qc_epsilon: f64,
    pub seed: u64,
}

fn default_runs() -> usize {
    5
}
fn default_candidates() -> SizeRange {
    SizeRange { min: 2, max: 6 }
}
fn default_depth() -> usize {
    10
}
fn default_skill() -> f64 {
    0.5
}
fn default_epsilon() -> f64 {
    0.33
}

impl ScenarioConfig {
    pub fn new(queries: usize, epsilon: f64, seed: u64) -> Self {
        ScenarioConfig {
            queries,
            runs: default_runs(),
            candidates: default_candidates(),
            ranking_depth: default_depth(),
            run_skill: default_skill(),
            qrel_policy: QrelPolicy::default(),
            epsilon,
            qc_epsilon: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Scenario(m.to_string()));
        if self.queries == 0 {
            return bad("queries must be >= 1");
        }
        if self.runs == 0 {
            return bad("runs must be >= 1");
        }
        if self.candidates.min == 0 || self.candidates.min > self.candidates.max {
            return bad("candidates needs 1 <= min <= max");
        }
        if self.ranking_depth == 0 {
            return bad("ranking_depth must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.run_skill) {
            return bad("run_skill must be in [0, 1]");
        }
        check_epsilon(self.epsilon)?;
        check_epsilon(self.qc_epsilon)?;
        Ok(())
    }
}

/// Synthetic runs and incumbent qrels over a hidden per-query universe order.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub runs: Vec<Run>,
    pub qrels: QrelSet,
    /// Latent order over every generated item, not just pool members.
    pub universe: LatentOrder,
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario, SimError> {
    config.validate()?;
    let universe_size = config.ranking_depth.max(config.candidates.max + 1);
    let mut universe = LatentOrder {
        orders: BTreeMap::new(),
        seed: config.seed,
    };
    let mut qrels = QrelSet::new("original");
    let mut lists: Vec<Vec<(QueryId, Vec<ItemId>)>> = vec![Vec::new(); config.runs];

    for qi in 0..config.queries {
        let query = QueryId::new(format!("s{qi:05}")).expect("generated id");
        let mut rng = seed::rng(config.seed, &format!("scenario/{query}"));
        let items: Vec<ItemId> = (0..universe_size)
            .map(|j| ItemId::new(format!("{query}-p{j:02}")).expect("generated id"))
            .collect();
        let mut order = items.clone();
        order.shuffle(&mut rng);

        let qrel = match config.qrel_policy {
            QrelPolicy::Worst => order[universe_size - 1].clone(),
            QrelPolicy::NonMax => order[rng.gen_range(1..universe_size)].clone(),
            QrelPolicy::Random => order[rng.gen_range(0..universe_size)].clone(),
        };
        qrels.insert(query.clone(), qrel.clone());

        let c = rng.gen_range(config.candidates.min..=config.candidates.max);
        let mut pickable: Vec<ItemId> = items.iter().filter(|i| **i != qrel).cloned().collect();
        pickable.shuffle(&mut rng);
        let candidates: Vec<ItemId> = pickable.into_iter().take(c).collect();
        let best_candidate = order
            .iter()
            .find(|i| candidates.contains(i))
            .expect("candidates are non-empty")
            .clone();

        for run_lists in lists.iter_mut() {
            let top = if rng.gen_bool(config.run_skill) {
                best_candidate.clone()
            } else {
                candidates.choose(&mut rng).expect("non-empty").clone()
            };
            let mut rest: Vec<ItemId> = items.iter().filter(|i| **i != top).cloned().collect();
            rest.shuffle(&mut rng);
            let mut ranking = vec![top];
            ranking.extend(rest.into_iter().take(config.ranking_depth - 1));
            run_lists.push((query.clone(), ranking));
        }
        universe.orders.insert(query, order);
    }

    let runs = lists
        .into_iter()
        .enumerate()
        .map(|(i, l)| Run::from_lists(format!("sim{}", i + 1), l))
        .collect();
    Ok(Scenario {
        config: config.clone(),
        runs,
        qrels,
        universe,
    })
}

/// Everything a simulated campaign produces.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scenario: Scenario,
    pub pools: Pools,
    /// Latent order restricted to pool members.
    pub latent: LatentOrder,
    pub preferences: PreferenceSet,
    pub preference_qrels: PreferenceQrels,
}

impl Simulation {
    /// A run whose top item is the latent-best pool member of every query.
    pub fn oracle_run(&self) -> Run {
        Run::from_lists(
            "oracle",
            self.latent.maxima().into_iter().map(|(q, best)| (q, vec![best])),
        )
    }

    /// Mean over queries of `1/|qrels|` when the latent maximum is among the
    /// preference qrels, else 0.
    pub fn latent_agreement(&self) -> f64 {
        let maxima = self.latent.maxima();
        let total: f64 = maxima
            .iter()
            .map(|(q, best)| {
                let items = self.preference_qrels.qrels.items(q);
                if items.contains(best) {
                    1.0 / items.len() as f64
                } else {
                    0.0
                }
            })
            .sum();
        total / maxima.len() as f64
    }
}

/// Generates a scenario, pools it at depth 1, judges every pool pair and
/// aggregates the judgments.
pub fn run_simulation(config: &ScenarioConfig) -> Result<Simulation, SimError> {
    let scenario = generate_scenario(config)?;
    let pools = build_pools(&scenario.runs, &scenario.qrels, 1).expect("depth 1 is valid");
    let latent = scenario.universe.restrict(&pools);
    let noise = NoiseModel::new(config.epsilon)?.with_qc_epsilon(config.qc_epsilon)?;
    let preferences = simulate_campaign(&pools, &latent, &noise, seed::derive(config.seed, "judge"))?;
    let preference_qrels = build_preference_qrels(&pools, &preferences, Mode::Strict);
    Ok(Simulation {
        scenario,
        pools,
        latent,
        preferences,
        preference_qrels,
    })
}

/// The set of queries whose preference qrels are exactly the latent maximum.
pub fn exact_matches(sim: &Simulation) -> BTreeSet<QueryId> {
    sim.latent
        .maxima()
        .into_iter()
        .filter(|(q, best)| sim.preference_qrels.qrels.items(q) == std::slice::from_ref(best))
        .map(|(q, _)| q)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::Resolution;
    use crate::tasking::{assemble_tasks, validate_task_result, QcBank, QcEntry, TaskConfig};

    fn q(s: &str) -> QueryId {
        QueryId::new(s).unwrap()
    }

    fn d(s: &str) -> ItemId {
        ItemId::new(s).unwrap()
    }

    fn two_item_latent() -> LatentOrder {
        LatentOrder {
            orders: [(q("q"), vec![d("good"), d("bad")])].into(),
            seed: 0,
        }
    }

    fn win_rate(eps: f64, draws: usize) -> f64 {
        let latent = two_item_latent();
        let noise = NoiseModel::new(eps).unwrap();
        let pair = JudgmentPair::real(&q("q"), &d("good"), &d("bad"));
        let wins = (0..draws as u64)
            .filter(|s| judge(&pair, &latent, &noise, *s).unwrap().winner == d("good"))
            .count();
        wins as f64 / draws as f64
    }

    #[test]
    fn epsilon_bounds() {
        assert!(NoiseModel::new(-0.1).is_err());
        assert!(NoiseModel::new(0.51).is_err());
        assert!(NoiseModel::new(0.5).is_ok());
        assert_eq!(NoiseModel::default().epsilon(), 0.33);
    }

    #[test]
    fn noiseless_judge_follows_latent() {
        assert_eq!(win_rate(0.0, 2000), 1.0);
    }

    #[test]
    fn coin_flip_at_half() {
        // chi-square with 1 dof, 99.9% critical value 10.83
        let n = 10_000;
        let wins = win_rate(0.5, n) * n as f64;
        let expected = n as f64 / 2.0;
        let chi2 = 2.0 * (wins - expected).powi(2) / expected;
        assert!(chi2 < 10.83, "chi2 = {chi2}");
    }

    #[test]
    fn thirty_three_percent_error() {
        let rate = win_rate(0.33, 10_000);
        assert!((rate - 0.67).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn judge_is_deterministic_and_checks_items() {
        let latent = two_item_latent();
        let noise = NoiseModel::new(0.33).unwrap();
        let pair = JudgmentPair::real(&q("q"), &d("good"), &d("bad"));
        assert_eq!(judge(&pair, &latent, &noise, 5), judge(&pair, &latent, &noise, 5));
        let stray = JudgmentPair::real(&q("q"), &d("good"), &d("nope"));
        assert!(matches!(judge(&stray, &latent, &noise, 5), Err(SimError::UnknownItem { .. })));
    }

    #[test]
    fn scenario_shapes() {
        let cfg = ScenarioConfig::new(50, 0.0, 3);
        let s = generate_scenario(&cfg).unwrap();
        assert_eq!(s.runs.len(), 5);
        assert_eq!(s.qrels.labels.len(), 50);
        for run in &s.runs {
            for ranking in run.rankings.values() {
                assert_eq!(ranking.len(), 10);
            }
        }
        let bad = ScenarioConfig {
            candidates: SizeRange { min: 3, max: 2 },
            ..cfg
        };
        assert!(generate_scenario(&bad).is_err());
        let parsed: ScenarioConfig = serde_json::from_str(r#"{"queries": 10, "epsilon": 0.1, "seed": 4}"#).unwrap();
        assert_eq!(parsed.runs, 5);
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"queries": 1, "seed": 1, "bogus": 2}"#).is_err());
    }

    #[test]
    fn noiseless_campaign_finds_maxima_without_cycles() {
        let sim = run_simulation(&ScenarioConfig::new(100, 0.0, 9)).unwrap();
        assert!(sim.preference_qrels.failures.is_empty());
        assert_eq!(sim.preference_qrels.cycles().count(), 0);
        assert_eq!(exact_matches(&sim).len(), 100);
        assert_eq!(sim.latent_agreement(), 1.0);
        assert!(sim
            .preference_qrels
            .results
            .values()
            .all(|r| r.resolution == Resolution::Unique));
    }

    #[test]
    fn campaign_determinism() {
        let a = run_simulation(&ScenarioConfig::new(40, 0.33, 21)).unwrap();
        let b = run_simulation(&ScenarioConfig::new(40, 0.33, 21)).unwrap();
        assert_eq!(a.preferences, b.preferences);
        let c = run_simulation(&ScenarioConfig::new(40, 0.33, 22)).unwrap();
        assert_ne!(a.preferences, c.preferences);
    }

    #[test]
    fn category_b_style_pairs_follow_noise() {
        // run top is latent-better than the qrel on every query
        let n = 4000;
        let mut judgments = 0;
        let mut top_wins = 0;
        let noise = NoiseModel::new(0.33).unwrap();
        for i in 0..n {
            let query = q(&format!("q{i}"));
            let latent = LatentOrder {
                orders: [(query.clone(), vec![d("top"), d("qrel")])].into(),
                seed: 0,
            };
            let pair = JudgmentPair::real(&query, &d("top"), &d("qrel"));
            let j = judge(&pair, &latent, &noise, 77).unwrap();
            judgments += 1;
            if j.winner == d("top") {
                top_wins += 1;
            }
        }
        let rate = top_wins as f64 / judgments as f64;
        assert!((rate - 0.67).abs() < 0.025, "{rate}");
    }

    #[test]
    fn assessors_against_qc() {
        let pairs: Vec<JudgmentPair> = (0..30)
            .map(|i| JudgmentPair::real(&q(&format!("q{i}")), &d("a"), &d("b")))
            .collect();
        let bank = QcBank {
            entries: (0..3)
                .map(|i| QcEntry {
                    query: q(&format!("c{i}")),
                    relevant: d("rel"),
                    distractor: d("junk"),
                })
                .collect(),
        };
        let tasks = assemble_tasks(&pairs, &bank, &TaskConfig::with_seed(1), None).unwrap();
        let latent = LatentOrder {
            orders: (0..30).map(|i| (q(&format!("q{i}")), vec![d("b"), d("a")])).collect(),
            seed: 0,
        };
        let diligent = SimulatedAssessor::Noisy {
            latent,
            noise: NoiseModel::new(0.5).unwrap(),
        };
        for t in &tasks {
            let answers = diligent.answer(t, 3).unwrap();
            assert!(validate_task_result(t, &answers).is_accepted());
        }
    }
}
