//! Leaderboard analytics over sparse qrels and preference judgments.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{QrelSet, Run};
use crate::ids::QueryId;
use crate::judgment_log::PreferenceSet;
use crate::pooling::{CategorySplit, QrelSelector};
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no queries to evaluate")]
    EmptyQueries,
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("binomial test needs at least one comparable outcome")]
    NoComparisons,
    #[error("number of comparisons for Bonferroni correction must be at least 1")]
    ZeroCorrection,
    #[error("rank correlation needs at least 2 entries, got {0}")]
    TooFewEntries(usize),
    #[error("score lists cover different keys")]
    KeyMismatch,
    #[error("tau-b undefined: one ranking is entirely tied")]
    DegenerateTau,
    #[error("confidence level must be in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

// ---------------------------------------------------------------------------
// MRR

/// Reciprocal of the best rank <= k holding any qrel for the query, else 0.
pub fn reciprocal_rank(run: &Run, qrels: &QrelSet, query: &QueryId, k: usize) -> f64 {
    let labels = qrels.items(query);
    run.ranking(query)
        .iter()
        .take(k)
        .position(|r| labels.contains(&r.item))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn eval_queries(qrels: &QrelSet, queries: Option<&BTreeSet<QueryId>>) -> Result<BTreeSet<QueryId>, MetricsError> {
    let qs = match queries {
        Some(qs) => qs.clone(),
        None => qrels.queries(),
    };
    if qs.is_empty() {
        return Err(MetricsError::EmptyQueries);
    }
    Ok(qs)
}

/// Per-query reciprocal ranks in query-id order.
pub fn per_query_rr(
    run: &Run,
    qrels: &QrelSet,
    k: usize,
    queries: Option<&BTreeSet<QueryId>>,
) -> Result<Vec<f64>, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroCutoff);
    }
    let qs = eval_queries(qrels, queries)?;
    Ok(qs.iter().map(|q| reciprocal_rank(run, qrels, q, k)).collect())
}

/// MRR@k over `queries` (default: every query with a qrel). Queries the run
/// does not rank score 0.
pub fn mrr_at_k(run: &Run, qrels: &QrelSet, k: usize, queries: Option<&BTreeSet<QueryId>>) -> Result<f64, MetricsError> {
    let rr = per_query_rr(run, qrels, k, queries)?;
    Ok(mean(&rr))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// A run that puts the selected qrel of every labelled query at rank 1.
pub fn perfect_run(qrels: &QrelSet, selector: QrelSelector) -> Run {
    Run::from_lists(
        "perfect",
        qrels
            .labels
            .keys()
            .filter_map(|q| selector.select(qrels, q).map(|item| (q.clone(), vec![item.clone()]))),
    )
}

// ---------------------------------------------------------------------------
// Binomial sign test

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinomialTest {
    pub p_value: f64,
    /// `alpha / m_comparisons`.
    pub threshold: f64,
    pub significant: bool,
}

/// Exact two-sided sign test p-value under p = 1/2, clamped to 1.
pub fn binomial_p_value(wins: u64, n: u64) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::NoComparisons);
    }
    let wins = wins.min(n);
    let lo = wins.max(n - wins);
    let tail = if n <= 120 {
        let mut c: u128 = 1; // C(n, n)
        let mut sum: u128 = 0;
        // walk t from n down to lo: C(n, t-1) = C(n, t) * t / (n - t + 1)
        let mut t = n;
        loop {
            sum += c;
            if t == lo {
                break;
            }
            c = c * t as u128 / (n - t + 1) as u128;
            t -= 1;
        }
        sum as f64 / 2f64.powi(n as i32)
    } else {
        let ln_fact = |x: u64| (1..=x).map(|i| (i as f64).ln()).sum::<f64>();
        let ln_n = ln_fact(n);
        let ln2n = n as f64 * std::f64::consts::LN_2;
        let terms: Vec<f64> = (lo..=n)
            .map(|t| ln_n - ln_fact(t) - ln_fact(n - t) - ln2n)
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m.exp() * terms.iter().map(|x| (x - m).exp()).sum::<f64>()
    };
    Ok((2.0 * tail).min(1.0))
}

/// Sign test with a Bonferroni-corrected threshold.
pub fn binomial_significance(wins: u64, n: u64, alpha: f64, m_comparisons: u64) -> Result<BinomialTest, MetricsError> {
    if m_comparisons == 0 {
        return Err(MetricsError::ZeroCorrection);
    }
    let p_value = binomial_p_value(wins, n)?;
    let threshold = alpha / m_comparisons as f64;
    Ok(BinomialTest {
        p_value,
        threshold,
        significant: p_value < threshold,
    })
}

// ---------------------------------------------------------------------------
// Win matrix

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    /// Queries where the column run's top beat the row run's top.
    pub wins: usize,
    pub comparable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinMatrix {
    pub runs: Vec<String>,
    /// `counts[row][col]`.
    pub counts: Vec<Vec<Cell>>,
    /// Frequency with which the column run beat the row run.
    pub ratio: Vec<Vec<Option<f64>>>,
    pub p_values: Vec<Vec<Option<f64>>>,
    pub significant: Vec<Vec<bool>>,
    /// Per column: number of rows it beats (ratio > 0.5).
    pub wins_row: Vec<usize>,
    pub alpha: f64,
    pub m_comparisons: u64,
}

#[derive(Debug, Clone, Default)]
pub struct WinMatrixConfig {
    pub alpha: f64,
    /// Defaults to C(R, 2) over the compared runs.
    pub m_comparisons: Option<u64>,
    pub queries: Option<BTreeSet<QueryId>>,
}

impl WinMatrixConfig {
    pub fn new(alpha: f64) -> Self {
        WinMatrixConfig {
            alpha,
            ..Default::default()
        }
    }
}

/// Compares runs by their rank-1 items over queries where both runs have a
/// top item, the tops differ, and that pair has a decided judgment.
pub fn win_matrix(runs: &[Run], preferences: &PreferenceSet, config: &WinMatrixConfig) -> Result<WinMatrix, MetricsError> {
    let r = runs.len();
    let m = config
        .m_comparisons
        .unwrap_or(((r * r.saturating_sub(1)) / 2).max(1) as u64);
    if m == 0 {
        return Err(MetricsError::ZeroCorrection);
    }
    let queries: BTreeSet<QueryId> = match &config.queries {
        Some(qs) => qs.clone(),
        None => runs.iter().flat_map(|run| run.queries().cloned()).collect(),
    };

    let mut counts = vec![vec![Cell::default(); r]; r];
    for q in &queries {
        let tops: Vec<_> = runs.iter().map(|run| run.top(q)).collect();
        for i in 0..r {
            for j in i + 1..r {
                let (Some(ti), Some(tj)) = (tops[i], tops[j]) else {
                    continue;
                };
                if ti == tj {
                    continue;
                }
                let Some(o) = preferences.lookup(q, ti, tj) else {
                    continue;
                };
                counts[i][j].comparable += 1;
                counts[j][i].comparable += 1;
                if &o.winner == tj {
                    counts[i][j].wins += 1;
                } else {
                    counts[j][i].wins += 1;
                }
            }
        }
    }

    let mut ratio = vec![vec![None; r]; r];
    let mut p_values = vec![vec![None; r]; r];
    let mut significant = vec![vec![false; r]; r];
    let mut wins_row = vec![0; r];
    for i in 0..r {
        for j in 0..r {
            let c = counts[i][j];
            if i == j || c.comparable == 0 {
                continue;
            }
            let frac = c.wins as f64 / c.comparable as f64;
            ratio[i][j] = Some(frac);
            let test = binomial_significance(c.wins as u64, c.comparable as u64, config.alpha, m)?;
            p_values[i][j] = Some(test.p_value);
            significant[i][j] = test.significant;
            if frac > 0.5 {
                wins_row[j] += 1;
            }
        }
    }

    Ok(WinMatrix {
        runs: runs.iter().map(|run| run.name.clone()).collect(),
        counts,
        ratio,
        p_values,
        significant,
        wins_row,
        alpha: config.alpha,
        m_comparisons: m,
    })
}

impl WinMatrix {
    pub fn index_of(&self, run: &str) -> Option<usize> {
        self.runs.iter().position(|r| r == run)
    }

    /// Markdown table; significant cells carry a trailing `*`, undefined
    /// cells render as `-`.
    pub fn write_markdown<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "| |")?;
        for name in &self.runs {
            write!(w, " {name} |")?;
        }
        writeln!(w)?;
        write!(w, "|---|")?;
        for _ in &self.runs {
            write!(w, "---:|")?;
        }
        writeln!(w)?;
        for (i, name) in self.runs.iter().enumerate() {
            write!(w, "| {name} |")?;
            for j in 0..self.runs.len() {
                match self.ratio[i][j] {
                    None => write!(w, " - |")?,
                    Some(v) => {
                        let mark = if self.significant[i][j] { "*" } else { "" };
                        write!(w, " {:.1}%{mark} |", v * 100.0)?
                    }
                }
            }
            writeln!(w)?;
        }
        write!(w, "| Wins |")?;
        for c in &self.wins_row {
            write!(w, " {c} |")?;
        }
        writeln!(w)
    }

    /// Long-form CSV, one line per ordered run pair.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "row,column,wins,comparable,ratio,p_value,significant")?;
        for (i, row) in self.runs.iter().enumerate() {
            for (j, col) in self.runs.iter().enumerate() {
                if i == j {
                    continue;
                }
                let c = self.counts[i][j];
                let ratio = self.ratio[i][j].map(|v| format!("{v:.6}")).unwrap_or_default();
                let p = self.p_values[i][j].map(|v| format!("{v:.6e}")).unwrap_or_default();
                writeln!(w, "{row},{col},{},{},{ratio},{p},{}", c.wins, c.comparable, self.significant[i][j])?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kendall tau

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauVariant {
    #[default]
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KendallTau {
    pub tau: f64,
    pub concordant: usize,
    pub discordant: usize,
    /// Pairs tied in the first list only.
    pub ties_a: usize,
    /// Pairs tied in the second list only.
    pub ties_b: usize,
    pub ties_both: usize,
    pub n_pairs: usize,
}

/// Rank correlation between two score maps over the same keys. Tied pairs
/// count as neither concordant nor discordant.
pub fn kendall_tau(
    scores_a: &BTreeMap<String, f64>,
    scores_b: &BTreeMap<String, f64>,
    variant: TauVariant,
) -> Result<KendallTau, MetricsError> {
    if scores_a.len() != scores_b.len() || scores_a.keys().any(|k| !scores_b.contains_key(k)) {
        return Err(MetricsError::KeyMismatch);
    }
    let n = scores_a.len();
    if n < 2 {
        return Err(MetricsError::TooFewEntries(n));
    }
    let pairs: Vec<(f64, f64)> = scores_a.iter().map(|(k, a)| (*a, scores_b[k])).collect();
    let (mut c, mut d, mut ta, mut tb, mut tboth) = (0, 0, 0, 0, 0);
    for i in 0..n {
        for j in i + 1..n {
            let da = pairs[i].0 - pairs[j].0;
            let db = pairs[i].1 - pairs[j].1;
            match (da == 0.0, db == 0.0) {
                (true, true) => tboth += 1,
                (true, false) => ta += 1,
                (false, true) => tb += 1,
                (false, false) if (da > 0.0) == (db > 0.0) => c += 1,
                _ => d += 1,
            }
        }
    }
    let n_pairs = n * (n - 1) / 2;
    let num = c as f64 - d as f64;
    let tau = match variant {
        TauVariant::A => num / n_pairs as f64,
        TauVariant::B => {
            let left = (n_pairs - ta - tboth) as f64;
            let right = (n_pairs - tb - tboth) as f64;
            if left == 0.0 || right == 0.0 {
                return Err(MetricsError::DegenerateTau);
            }
            num / (left * right).sqrt()
        }
    };
    Ok(KendallTau {
        tau,
        concordant: c,
        discordant: d,
        ties_a: ta,
        ties_b: tb,
        ties_both: tboth,
        n_pairs,
    })
}

/// Reads `name,score` CSV lines (an optional header and `#` lines are skipped).
pub fn read_scores<R: BufRead>(reader: R) -> Result<BTreeMap<String, f64>, MetricsError> {
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MetricsError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let Some((name, score)) = t.rsplit_once(',') else {
            return Err(MetricsError::Malformed {
                line: i + 1,
                reason: "expected `name,score`".into(),
            });
        };
        match score.trim().parse::<f64>() {
            Ok(v) => {
                out.insert(name.trim().to_string(), v);
            }
            Err(_) if out.is_empty() => continue, // header
            Err(_) => {
                return Err(MetricsError::Malformed {
                    line: i + 1,
                    reason: format!("bad score {score:?}"),
                })
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bootstrap

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn with_seed(seed: u64) -> Self {
        BootstrapConfig {
            level: 0.95,
            resamples: 10_000,
            seed,
        }
    }
}

/// Percentile bootstrap interval for the mean. Resample `r` draws from its
/// own derived seed, so the result does not depend on thread count.
pub fn bootstrap_mean_ci(values: &[f64], config: &BootstrapConfig) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyQueries);
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(MetricsError::BadLevel(config.level));
    }
    use rand::Rng;
    let n = values.len();
    let mut means: Vec<f64> = (0..config.resamples.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(config.seed, &format!("bootstrap/{r}"));
            (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - config.level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn bootstrap_ci(
    run: &Run,
    qrels: &QrelSet,
    k: usize,
    queries: Option<&BTreeSet<QueryId>>,
    config: &BootstrapConfig,
) -> Result<(f64, f64), MetricsError> {
    bootstrap_mean_ci(&per_query_rr(run, qrels, k, queries)?, config)
}

// ---------------------------------------------------------------------------
// Consistency with preferences

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Agreement {
    pub agreement: Option<f64>,
    pub agreeing: usize,
    pub n_pairs: usize,
}

/// Over decided pairs with both items in the run's top-k, the fraction the
/// run orders the same way as the preference.
pub fn consistency_agreement(run: &Run, preferences: &PreferenceSet, k: usize) -> Agreement {
    let (mut agreeing, mut n_pairs) = (0, 0);
    for query in preferences.queries() {
        let top: Vec<_> = run.ranking(query).iter().take(k).map(|r| &r.item).collect();
        for o in preferences.outcomes(query) {
            let (Some(w), Some(l)) = (
                top.iter().position(|i| **i == o.winner),
                top.iter().position(|i| **i == o.loser),
            ) else {
                continue;
            };
            n_pairs += 1;
            if w < l {
                agreeing += 1;
            }
        }
    }
    Agreement {
        agreement: (n_pairs > 0).then(|| agreeing as f64 / n_pairs as f64),
        agreeing,
        n_pairs,
    }
}

// ---------------------------------------------------------------------------
// Category comparison

/// Outcomes of the per-category side-by-side check: in category A the run's
/// top (which is the qrel) faces the run's second item; in category B the
/// run's top faces the selected qrel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CategoryComparison {
    pub a_qrel_preferred: usize,
    pub a_other_preferred: usize,
    pub b_qrel_preferred: usize,
    pub b_other_preferred: usize,
    pub unjudged: usize,
}

impl CategoryComparison {
    /// Share of category A queries where the qrel (= run top) won.
    pub fn a_top_rate(&self) -> Option<f64> {
        let n = self.a_qrel_preferred + self.a_other_preferred;
        (n > 0).then(|| self.a_qrel_preferred as f64 / n as f64)
    }

    /// Share of category B queries where the run's top beat the qrel.
    pub fn b_top_rate(&self) -> Option<f64> {
        let n = self.b_qrel_preferred + self.b_other_preferred;
        (n > 0).then(|| self.b_other_preferred as f64 / n as f64)
    }
}

pub fn category_comparison(
    run: &Run,
    qrels: &QrelSet,
    split: &CategorySplit,
    selector: QrelSelector,
    preferences: &PreferenceSet,
) -> CategoryComparison {
    let mut out = CategoryComparison::default();
    for q in &split.category_a {
        let ranking = run.ranking(q);
        let (Some(top), Some(second)) = (ranking.first(), ranking.get(1)) else {
            out.unjudged += 1;
            continue;
        };
        match preferences.lookup(q, &top.item, &second.item) {
            Some(o) if o.winner == top.item => out.a_qrel_preferred += 1,
            Some(_) => out.a_other_preferred += 1,
            None => out.unjudged += 1,
        }
    }
    for q in &split.category_b {
        let (Some(top), Some(qrel)) = (run.top(q), selector.select(qrels, q)) else {
            out.unjudged += 1;
            continue;
        };
        match preferences.lookup(q, top, qrel) {
            Some(o) if &o.winner == qrel => out.b_qrel_preferred += 1,
            Some(_) => out.b_other_preferred += 1,
            None => out.unjudged += 1,
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Leaderboard

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub run: String,
    pub qrels: String,
    pub mrr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_queries: usize,
}

/// One row per run per qrel set. Without explicit `queries`, each qrel set is
/// evaluated over its own labelled queries.
pub fn leaderboard_report(
    runs: &[Run],
    qrel_sets: &[&QrelSet],
    k: usize,
    queries: Option<&BTreeSet<QueryId>>,
    bootstrap: &BootstrapConfig,
) -> Result<Vec<LeaderboardRow>, MetricsError> {
    let mut rows = Vec::new();
    for qrels in qrel_sets {
        for run in runs {
            let rr = per_query_rr(run, qrels, k, queries)?;
            let cfg = BootstrapConfig {
                seed: seed::derive(bootstrap.seed, &format!("{}/{}", run.name, qrels.name)),
                ..*bootstrap
            };
            let (ci_low, ci_high) = bootstrap_mean_ci(&rr, &cfg)?;
            rows.push(LeaderboardRow {
                run: run.name.clone(),
                qrels: qrels.name.clone(),
                mrr: mean(&rr),
                ci_low,
                ci_high,
                n_queries: rr.len(),
            });
        }
    }
    Ok(rows)
}

pub fn write_leaderboard_csv<W: Write>(rows: &[LeaderboardRow], mut w: W) -> io::Result<()> {
    writeln!(w, "run,qrels,mrr,ci_low,ci_high,n_queries")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.4},{:.4},{:.4},{}",
            r.run, r.qrels, r.mrr, r.ci_low, r.ci_high, r.n_queries
        )?;
    }
    Ok(())
}

/// `run -> mrr` for one qrel set, as used by rank-correlation checks.
pub fn scores_for(rows: &[LeaderboardRow], qrels: &str) -> BTreeMap<String, f64> {
    rows.iter()
        .filter(|r| r.qrels == qrels)
        .map(|r| (r.run.clone(), r.mrr))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ItemId;
    use crate::judgment_log::{PairKind, PreferenceJudgment};
    use proptest::prelude::*;

    fn q(s: &str) -> QueryId {
        QueryId::new(s).unwrap()
    }

    fn d(s: &str) -> ItemId {
        ItemId::new(s).unwrap()
    }

    fn j(query: &str, winner: &str, loser: &str) -> PreferenceJudgment {
        PreferenceJudgment {
            query: q(query),
            winner: d(winner),
            loser: d(loser),
            assessor: "a".into(),
            task_id: "t".into(),
            timestamp: 0,
            kind: PairKind::Real,
            replica: 0,
        }
    }

    fn qrels(entries: &[(&str, &str)]) -> QrelSet {
        let mut s = QrelSet::new("qrels");
        for (qq, dd) in entries {
            s.insert(q(qq), d(dd));
        }
        s
    }

    fn run(name: &str, lists: &[(&str, &[&str])]) -> Run {
        Run::from_lists(name, lists.iter().map(|(qq, items)| (q(qq), items.iter().map(|i| d(i)).collect::<Vec<_>>())))
    }

    #[test]
    fn rr_examples() {
        let r = run("r", &[("q", &["x", "y", "rel"])]);
        let set = qrels(&[("q", "rel")]);
        assert_eq!(mrr_at_k(&r, &set, 10, None).unwrap(), 1.0 / 3.0);

        let items: Vec<String> = (1..=11).map(|i| if i == 11 { "rel".into() } else { format!("x{i}") }).collect();
        let refs: Vec<&str> = items.iter().map(String::as_str).collect();
        let r = run("r", &[("q", &refs)]);
        assert_eq!(mrr_at_k(&r, &set, 10, None).unwrap(), 0.0);
        assert_eq!(mrr_at_k(&r, &set, 11, None).unwrap(), 1.0 / 11.0);
    }

    #[test]
    fn any_qrel_counts_and_absent_queries_score_zero() {
        let set = qrels(&[("q1", "a"), ("q1", "b"), ("q2", "c")]);
        let r = run("r", &[("q1", &["x", "b", "a"])]);
        assert_eq!(mrr_at_k(&r, &set, 10, None).unwrap(), 0.25);
        assert_eq!(mrr_at_k(&r, &set, 0, None), Err(MetricsError::ZeroCutoff));
        assert_eq!(mrr_at_k(&r, &QrelSet::new("e"), 10, None), Err(MetricsError::EmptyQueries));
    }

    #[test]
    fn perfect_run_scores_one() {
        let set = qrels(&[("q1", "a"), ("q1", "b"), ("q2", "c")]);
        let p = perfect_run(&set, QrelSelector::FirstInFile);
        assert_eq!(p.top(&q("q1")), Some(&d("a")));
        assert_eq!(mrr_at_k(&p, &set, 10, None).unwrap(), 1.0);
    }

    #[test]
    fn binomial_examples() {
        assert_eq!(binomial_p_value(1, 2).unwrap(), 1.0);
        assert_eq!(binomial_p_value(5, 5).unwrap(), 0.0625);
        let t = binomial_significance(0, 8, 0.05, 1).unwrap();
        assert!((t.p_value - 0.0078125).abs() < 1e-12);
        assert!(t.significant);
        assert!(!binomial_significance(0, 8, 0.05, 7).unwrap().significant);
        assert_eq!(binomial_p_value(0, 0), Err(MetricsError::NoComparisons));
        assert_eq!(binomial_significance(1, 2, 0.05, 0), Err(MetricsError::ZeroCorrection));
    }

    #[test]
    fn binomial_large_n_matches_small_path() {
        // 120 is computed exactly; 121 uses the log-space path
        for n in [121u64, 200, 500] {
            for w in [0, n / 4, n / 2] {
                let p = binomial_p_value(w, n).unwrap();
                let dist = statrs::distribution::Binomial::new(0.5, n).unwrap();
                use statrs::distribution::DiscreteCDF;
                let lo = w.min(n - w);
                let oracle = (2.0 * dist.cdf(lo)).min(1.0);
                assert!((p - oracle).abs() < 1e-9 * oracle.max(1e-300) + 1e-15, "n={n} w={w} {p} {oracle}");
            }
        }
    }

    #[test]
    fn win_matrix_examples() {
        let a = run("A", &[("q1", &["a"]), ("q2", &["b"])]);
        let b = run("B", &[("q1", &["a"]), ("q2", &["b"])]);
        let m = win_matrix(&[a, b], &PreferenceSet::default(), &WinMatrixConfig::new(0.05)).unwrap();
        assert!(m.ratio.iter().flatten().all(Option::is_none));
        assert_eq!(m.wins_row, vec![0, 0]);

        let mut prefs = Vec::new();
        let mut x_lists = Vec::new();
        let mut y_lists = Vec::new();
        for i in 0..10 {
            let qq = format!("q{i}");
            prefs.push(j(&qq, "good", "bad"));
            x_lists.push((q(&qq), vec![d("good")]));
            y_lists.push((q(&qq), vec![d("bad")]));
        }
        let x = Run::from_lists("X", x_lists);
        let y = Run::from_lists("Y", y_lists);
        let m = win_matrix(&[x, y], &PreferenceSet::from_judgments(prefs), &WinMatrixConfig::new(0.05)).unwrap();
        let (xi, yi) = (m.index_of("X").unwrap(), m.index_of("Y").unwrap());
        assert_eq!(m.ratio[yi][xi], Some(1.0));
        assert_eq!(m.ratio[xi][yi], Some(0.0));
        assert_eq!(m.counts[yi][xi], Cell { wins: 10, comparable: 10 });
        assert!(m.significant[yi][xi] && m.significant[xi][yi]);
        assert_eq!(m.wins_row[xi], 1);
        assert_eq!(m.m_comparisons, 1);

        let mut md = Vec::new();
        m.write_markdown(&mut md).unwrap();
        let md = String::from_utf8(md).unwrap();
        assert!(md.contains("100.0%*"), "{md}");
        assert!(md.contains("| - |"));
        let mut csv = Vec::new();
        m.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn tau_examples() {
        let a: BTreeMap<String, f64> = [("x", 1.0), ("y", 2.0), ("z", 3.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let rev: BTreeMap<String, f64> = a.iter().map(|(k, v)| (k.clone(), -v)).collect();
        assert_eq!(kendall_tau(&a, &a, TauVariant::A).unwrap().tau, 1.0);
        assert_eq!(kendall_tau(&a, &rev, TauVariant::A).unwrap().tau, -1.0);
        let one: BTreeMap<String, f64> = [("x".to_string(), 1.0)].into();
        assert_eq!(kendall_tau(&one, &one, TauVariant::A), Err(MetricsError::TooFewEntries(1)));
        let other: BTreeMap<String, f64> = [("x", 1.0), ("y", 2.0), ("w", 3.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        assert_eq!(kendall_tau(&a, &other, TauVariant::A), Err(MetricsError::KeyMismatch));

        let tied: BTreeMap<String, f64> = [("x", 1.0), ("y", 1.0), ("z", 3.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let ta = kendall_tau(&tied, &a, TauVariant::A).unwrap();
        assert_eq!((ta.concordant, ta.ties_a), (2, 1));
        assert!((ta.tau - 2.0 / 3.0).abs() < 1e-15);
        let tb = kendall_tau(&tied, &a, TauVariant::B).unwrap();
        assert!((tb.tau - 2.0 / (2.0f64 * 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn read_scores_csv() {
        let s = read_scores("run,score\nA,0.5\nB,0.25\n".as_bytes()).unwrap();
        assert_eq!(s["A"], 0.5);
        assert_eq!(s.len(), 2);
        assert!(read_scores("A,0.5\nB,zz\n".as_bytes()).is_err());
    }

    #[test]
    fn bootstrap_examples() {
        let cfg = BootstrapConfig {
            resamples: 500,
            ..BootstrapConfig::with_seed(3)
        };
        assert_eq!(bootstrap_mean_ci(&[0.5; 20], &cfg).unwrap(), (0.5, 0.5));
        let values: Vec<f64> = (0..50).map(|i| 1.0 / (1 + i % 7) as f64).collect();
        let a = bootstrap_mean_ci(&values, &cfg).unwrap();
        assert_eq!(a, bootstrap_mean_ci(&values, &cfg).unwrap());
        let m = mean(&values);
        assert!(a.0 <= m && m <= a.1);
        assert!(bootstrap_mean_ci(&[], &cfg).is_err());
        let bad = BootstrapConfig { level: 1.0, ..cfg };
        assert!(bootstrap_mean_ci(&values, &bad).is_err());
    }

    #[test]
    fn bootstrap_independent_of_threads() {
        let values: Vec<f64> = (0..40).map(|i| (i % 5) as f64 / 4.0).collect();
        let cfg = BootstrapConfig {
            resamples: 300,
            ..BootstrapConfig::with_seed(11)
        };
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let one = single.install(|| bootstrap_mean_ci(&values, &cfg).unwrap());
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let four = many.install(|| bootstrap_mean_ci(&values, &cfg).unwrap());
        assert_eq!(one, four);
    }

    #[test]
    fn agreement_examples() {
        let prefs = PreferenceSet::from_judgments([j("q", "a", "b"), j("q", "a", "c"), j("q", "b", "c")]);
        let r = run("r", &[("q", &["a", "b", "c"])]);
        let ag = consistency_agreement(&r, &prefs, 10);
        assert_eq!((ag.agreement, ag.n_pairs), (Some(1.0), 3));
        let r = run("r", &[("q", &["c", "b", "x", "a"])]);
        let ag = consistency_agreement(&r, &prefs, 3);
        assert_eq!((ag.agreeing, ag.n_pairs), (0, 1));
        let r = run("r", &[("q", &["z"])]);
        let ag = consistency_agreement(&r, &prefs, 10);
        assert_eq!((ag.agreement, ag.n_pairs), (None, 0));
    }

    #[test]
    fn category_comparison_counts() {
        let r = run("r", &[("qa", &["rel", "second"]), ("qb", &["top", "x"])]);
        let set = qrels(&[("qa", "rel"), ("qb", "rel2")]);
        let split = crate::pooling::split_categories(&r, &set, QrelSelector::FirstInFile);
        let prefs = PreferenceSet::from_judgments([j("qa", "rel", "second"), j("qb", "top", "rel2")]);
        let c = category_comparison(&r, &set, &split, QrelSelector::FirstInFile, &prefs);
        assert_eq!(c.a_top_rate(), Some(1.0));
        assert_eq!(c.b_top_rate(), Some(1.0));
        assert_eq!(c.unjudged, 0);
    }

    #[test]
    fn leaderboard_rows() {
        let set = qrels(&[("q1", "a"), ("q2", "b")]);
        let p = perfect_run(&set, QrelSelector::FirstInFile);
        let r = run("r", &[("q1", &["x", "a"]), ("q2", &["b"])]);
        let cfg = BootstrapConfig {
            resamples: 200,
            ..BootstrapConfig::with_seed(1)
        };
        let rows = leaderboard_report(&[p, r], &[&set], 10, None, &cfg).unwrap();
        assert_eq!(rows[0].mrr, 1.0);
        assert_eq!((rows[0].ci_low, rows[0].ci_high), (1.0, 1.0));
        assert_eq!(rows[1].mrr, 0.75);
        assert!(rows.iter().all(|r| r.ci_low <= r.mrr && r.mrr <= r.ci_high));
        let mut out = Vec::new();
        write_leaderboard_csv(&rows, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().contains("r,qrels,0.7500"));
        assert_eq!(scores_for(&rows, "qrels").len(), 2);
    }

    fn brute_rr(run: &Run, qrels: &QrelSet, q: &QueryId, k: usize) -> f64 {
        let mut best = 0.0f64;
        for (i, r) in run.ranking(q).iter().enumerate() {
            let rank = i + 1;
            if rank <= k && qrels.items(q).iter().any(|x| *x == r.item) {
                best = best.max(1.0 / rank as f64);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn binomial_symmetry_and_monotonicity(n in 1u64..60) {
            let mut prev = f64::INFINITY;
            for w in 0..=n {
                prop_assert_eq!(binomial_p_value(w, n).unwrap(), binomial_p_value(n - w, n).unwrap());
            }
            // walk outward from the centre
            for w in (n / 2..=n).rev().collect::<Vec<_>>().into_iter().rev() {
                let p = binomial_p_value(w, n).unwrap();
                prop_assert!(p <= prev);
                prev = p;
            }
        }

        #[test]
        fn bonferroni_monotone(w in 0u64..30, extra in 0u64..30, m in 1u64..100, dm in 0u64..100) {
            let n = w + extra + 1;
            let a = binomial_significance(w, n, 0.05, m).unwrap();
            let b = binomial_significance(w, n, 0.05, m + dm).unwrap();
            prop_assert!(!b.significant || a.significant);
        }

        #[test]
        fn tau_bounds_and_relabeling(values in prop::collection::vec((0u8..20, 0u8..20), 2..12), perm_seed in any::<u64>()) {
            let a: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, v)| (format!("r{i:02}"), v.0 as f64)).collect();
            let b: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, v)| (format!("r{i:02}"), v.1 as f64)).collect();
            let t = kendall_tau(&a, &b, TauVariant::A).unwrap();
            prop_assert!((-1.0..=1.0).contains(&t.tau));
            prop_assert_eq!(t.concordant + t.discordant + t.ties_a + t.ties_b + t.ties_both, t.n_pairs);
            use rand::seq::SliceRandom;
            let mut labels: Vec<usize> = (0..values.len()).collect();
            labels.shuffle(&mut seed::rng(perm_seed, "relabel"));
            let a2: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, v)| (format!("s{:02}", labels[i]), v.0 as f64)).collect();
            let b2: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, v)| (format!("s{:02}", labels[i]), v.1 as f64)).collect();
            prop_assert_eq!(kendall_tau(&a2, &b2, TauVariant::A).unwrap().tau, t.tau);
        }

        #[test]
        fn mrr_matches_scan(
            lists in prop::collection::vec(prop::collection::vec(0u8..30, 0..20), 1..20),
            labels in prop::collection::vec(prop::collection::btree_set(0u8..30, 1..3), 1..20),
            k in 1usize..20,
        ) {
            let run = Run::from_lists("r", lists.iter().enumerate().map(|(i, l)| {
                let mut seen = BTreeSet::new();
                (q(&format!("q{i}")), l.iter().filter(|x| seen.insert(**x)).map(|x| d(&format!("d{x}"))).collect::<Vec<_>>())
            }));
            let mut set = QrelSet::new("x");
            for (i, l) in labels.iter().enumerate() {
                for x in l { set.insert(q(&format!("q{i}")), d(&format!("d{x}"))); }
            }
            let got = mrr_at_k(&run, &set, k, None).unwrap();
            let qs = set.queries();
            let expected = qs.iter().map(|qq| brute_rr(&run, &set, qq, k)).sum::<f64>() / qs.len() as f64;
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn agreement_matches_enumeration(
            ranking in prop::collection::vec(0u8..8, 0..8),
            edges in prop::collection::vec((0u8..8, 0u8..8), 0..20),
            k in 1usize..8,
        ) {
            let mut seen = BTreeSet::new();
            let ranking: Vec<u8> = ranking.into_iter().filter(|x| seen.insert(*x)).collect();
            let run = Run::from_lists("r", [(q("q"), ranking.iter().map(|x| d(&format!("d{x}"))).collect::<Vec<_>>())]);
            let mut done = BTreeSet::new();
            let mut judgments = Vec::new();
            for (w, l) in edges {
                if w == l || !done.insert((w.min(l), w.max(l))) { continue; }
                judgments.push(j("q", &format!("d{w}"), &format!("d{l}")));
            }
            let ag = consistency_agreement(&run, &PreferenceSet::from_judgments(judgments.clone()), k);
            let top: Vec<String> = ranking.iter().take(k).map(|x| format!("d{x}")).collect();
            let (mut agree, mut n) = (0, 0);
            for jj in &judgments {
                let wp = top.iter().position(|x| x == jj.winner.as_str());
                let lp = top.iter().position(|x| x == jj.loser.as_str());
                if let (Some(wp), Some(lp)) = (wp, lp) {
                    n += 1;
                    if wp < lp { agree += 1; }
                }
            }
            prop_assert_eq!((ag.agreeing, ag.n_pairs), (agree, n));
            if let Some(a) = ag.agreement { prop_assert!((0.0..=1.0).contains(&a)); }
        }

        #[test]
        fn win_matrix_antisymmetry(
            tops in prop::collection::vec(prop::collection::vec(0u8..4, 6), 2..5),
            bits in prop::collection::vec(any::<bool>(), 36),
        ) {
            let runs: Vec<Run> = tops.iter().enumerate().map(|(r, t)| {
                Run::from_lists(format!("run{r}"), t.iter().enumerate().map(|(qi, x)| (q(&format!("q{qi}")), vec![d(&format!("d{x}"))])))
            }).collect();
            let mut judgments = Vec::new();
            for qi in 0..6 {
                let mut k = 0;
                for a in 0..4u8 {
                    for b in a + 1..4 {
                        if bits[qi * 6 + k] { judgments.push(j(&format!("q{qi}"), &format!("d{a}"), &format!("d{b}"))); }
                        else { judgments.push(j(&format!("q{qi}"), &format!("d{b}"), &format!("d{a}"))); }
                        k += 1;
                    }
                }
            }
            let m = win_matrix(&runs, &PreferenceSet::from_judgments(judgments), &WinMatrixConfig::new(0.05)).unwrap();
            for i in 0..runs.len() {
                prop_assert!(m.ratio[i][i].is_none());
                for jj in 0..runs.len() {
                    prop_assert_eq!(m.counts[i][jj].comparable, m.counts[jj][i].comparable);
                    if i != jj {
                        prop_assert_eq!(m.counts[i][jj].wins + m.counts[jj][i].wins, m.counts[i][jj].comparable);
                        prop_assert_eq!(m.significant[i][jj], m.significant[jj][i]);
                        if let (Some(x), Some(y)) = (m.ratio[i][jj], m.ratio[jj][i]) {
                            prop_assert!((x + y - 1.0).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
