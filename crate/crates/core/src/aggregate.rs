//! Preference qrels from pairwise judgments.
//!
//! Each query's pool is treated as a round-robin tournament. Items with the
//! most wins survive to the next round, where wins are recounted using only
//! survivor-vs-survivor judgments. A single survivor becomes the preference
//! qrel. If a round eliminates nobody, the survivors form a cycle and all of
//! them become qrels.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::QrelSet;
use crate::ids::{ItemId, QueryId};
use crate::judgment_log::{LogEvent, PairKind, PreferenceJudgment, PreferenceSet};
use crate::pooling::Pools;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize)]
pub enum AggregateError {
    #[error("query {query}: {} survivor pairs unjudged", missing.len())]
    MissingJudgments {
        query: QueryId,
        missing: Vec<(ItemId, ItemId)>,
    },
    #[error("query {0}: empty pool")]
    EmptyPool(QueryId),
    #[error("judgment is about ({got_a}, {got_b}) for {got_query}, expected ({want_a}, {want_b}) for {want_query}")]
    JudgmentMismatch {
        want_query: QueryId,
        want_a: ItemId,
        want_b: ItemId,
        got_query: QueryId,
        got_a: ItemId,
        got_b: ItemId,
    },
}

/// Missing survivor pairs are an error (`Strict`) or skipped (`Lenient`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Unique,
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub survivors: Vec<ItemId>,
    pub wins: BTreeMap<ItemId, usize>,
    /// Survivor pairs skipped as no-contests (lenient mode only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub no_contest: Vec<(ItemId, ItemId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TournamentResult {
    #[serde(rename = "qid")]
    pub query: QueryId,
    pub qrels: BTreeSet<ItemId>,
    pub resolution: Resolution,
    pub rounds: Vec<Round>,
}

pub fn run_tournament(
    query: &QueryId,
    members: &BTreeSet<ItemId>,
    preferences: &PreferenceSet,
    mode: Mode,
) -> Result<TournamentResult, AggregateError> {
    if members.is_empty() {
        return Err(AggregateError::EmptyPool(query.clone()));
    }
    let mut survivors: Vec<ItemId> = members.iter().cloned().collect();
    let mut rounds = Vec::new();
    loop {
        if survivors.len() == 1 {
            return Ok(TournamentResult {
                query: query.clone(),
                qrels: survivors.into_iter().collect(),
                resolution: Resolution::Unique,
                rounds,
            });
        }

        let mut wins: BTreeMap<ItemId, usize> = survivors.iter().map(|s| (s.clone(), 0)).collect();
        let mut missing = Vec::new();
        for (i, a) in survivors.iter().enumerate() {
            for b in &survivors[i + 1..] {
                match preferences.lookup(query, a, b) {
                    Some(o) => *wins.get_mut(&o.winner).expect("winner is a survivor") += 1,
                    None => missing.push((a.clone(), b.clone())),
                }
            }
        }
        if mode == Mode::Strict && !missing.is_empty() {
            return Err(AggregateError::MissingJudgments {
                query: query.clone(),
                missing,
            });
        }

        let best = wins.values().copied().max().unwrap_or(0);
        let leaders: Vec<ItemId> = survivors
            .iter()
            .filter(|s| wins[*s] == best)
            .cloned()
            .collect();
        let stalled = leaders.len() == survivors.len();
        rounds.push(Round {
            survivors: std::mem::take(&mut survivors),
            wins,
            no_contest: missing,
        });
        if stalled {
            return Ok(TournamentResult {
                query: query.clone(),
                qrels: leaders.into_iter().collect(),
                resolution: Resolution::Cycle,
                rounds,
            });
        }
        survivors = leaders;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PreferenceQrels {
    pub qrels: QrelSet,
    pub results: BTreeMap<QueryId, TournamentResult>,
    pub failures: BTreeMap<QueryId, AggregateError>,
}

impl PreferenceQrels {
    pub fn cycles(&self) -> impl Iterator<Item = &TournamentResult> {
        self.results
            .values()
            .filter(|r| r.resolution == Resolution::Cycle)
    }
}

/// Runs a tournament per pool. Failing queries are reported and skipped.
pub fn build_preference_qrels(pools: &Pools, preferences: &PreferenceSet, mode: Mode) -> PreferenceQrels {
    let outcomes: Vec<(QueryId, Result<TournamentResult, AggregateError>)> = pools
        .par_iter()
        .map(|(q, pool)| (q.clone(), run_tournament(q, &pool.members, preferences, mode)))
        .collect();

    let mut out = PreferenceQrels {
        qrels: QrelSet::new("preference"),
        ..Default::default()
    };
    for (query, outcome) in outcomes {
        match outcome {
            Ok(result) => {
                for item in &result.qrels {
                    out.qrels.insert(query.clone(), item.clone());
                }
                out.results.insert(query, result);
            }
            Err(e) => {
                out.failures.insert(query, e);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PairingWinrate {
    pub wins: usize,
    /// Decided pairs with exactly one qrel side.
    pub pairings: usize,
    /// Decided pairs where both sides are qrels (excluded from the rate).
    pub both_qrels: usize,
    pub rate: Option<f64>,
}

/// Fraction of decided pairings won by the qrel side, over pairs where
/// exactly one side is a qrel for the query.
pub fn qrel_pairing_winrate(qrels: &QrelSet, preferences: &PreferenceSet) -> PairingWinrate {
    let mut out = PairingWinrate::default();
    for query in preferences.queries() {
        for o in preferences.outcomes(query) {
            match (qrels.contains(query, &o.winner), qrels.contains(query, &o.loser)) {
                (true, true) => out.both_qrels += 1,
                (true, false) => {
                    out.wins += 1;
                    out.pairings += 1;
                }
                (false, true) => out.pairings += 1,
                (false, false) => {}
            }
        }
    }
    out.rate = (out.pairings > 0).then(|| out.wins as f64 / out.pairings as f64);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChallengeOutcome {
    pub best: ItemId,
    pub changed: bool,
    /// Event to append to the judgment log.
    pub event: LogEvent,
}

/// Settles a newly surfaced item against the incumbent best-known answer.
pub fn challenge(
    incumbent: &ItemId,
    challenger: &ItemId,
    judgment: &PreferenceJudgment,
) -> Result<ChallengeOutcome, AggregateError> {
    if judgment.kind != PairKind::Real || !judgment.involves(incumbent, challenger) || incumbent == challenger {
        return Err(AggregateError::JudgmentMismatch {
            want_query: judgment.query.clone(),
            want_a: incumbent.clone(),
            want_b: challenger.clone(),
            got_query: judgment.query.clone(),
            got_a: judgment.winner.clone(),
            got_b: judgment.loser.clone(),
        });
    }
    let best = judgment.winner.clone();
    Ok(ChallengeOutcome {
        changed: &best != incumbent,
        event: LogEvent::QrelUpdate {
            query: judgment.query.clone(),
            previous: incumbent.clone(),
            best: best.clone(),
            timestamp: judgment.timestamp,
        },
        best,
    })
}

/// Replaces the incumbent with the challenge winner in a qrel set.
pub fn apply_challenge(qrels: &mut QrelSet, query: &QueryId, incumbent: &ItemId, outcome: &ChallengeOutcome) {
    if !outcome.changed {
        return;
    }
    let items = qrels.labels.entry(query.clone()).or_default();
    items.retain(|i| i != incumbent && i != &outcome.best);
    items.insert(0, outcome.best.clone());
}
