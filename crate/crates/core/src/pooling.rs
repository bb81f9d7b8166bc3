//! Shallow judgment pools built from run tops plus incumbent qrels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{QrelSet, Run};
use crate::ids::{ItemId, QueryId};
use crate::seed;

/// Provenance tag carried by pool members that came from the qrels.
pub const QREL_TAG: &str = "qrel";

#[derive(Debug, thiserror::Error)]
pub enum PoolingError {
    #[error("need {requested} queries with pool size >= {min_size}, only {eligible} eligible")]
    InsufficientQueries {
        requested: usize,
        eligible: usize,
        min_size: usize,
    },
    #[error("pool depth must be at least 1")]
    ZeroDepth,
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    #[serde(rename = "qid")]
    pub query: QueryId,
    pub members: BTreeSet<ItemId>,
    pub provenance: BTreeMap<ItemId, BTreeSet<String>>,
}

impl Pool {
    fn new(query: QueryId) -> Self {
        Pool {
            query,
            members: BTreeSet::new(),
            provenance: BTreeMap::new(),
        }
    }

    fn add(&mut self, item: &ItemId, source: &str) {
        self.members.insert(item.clone());
        self.provenance
            .entry(item.clone())
            .or_default()
            .insert(source.to_string());
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, item: &ItemId) -> bool {
        self.members.contains(item)
    }

    /// True when no run contributed to this pool.
    pub fn is_qrel_only(&self) -> bool {
        self.provenance
            .values()
            .all(|tags| tags.len() == 1 && tags.contains(QREL_TAG))
    }

    /// Unordered member pairs as `(smaller, larger)`.
    pub fn pairs(&self) -> impl Iterator<Item = (&ItemId, &ItemId)> {
        let members: Vec<&ItemId> = self.members.iter().collect();
        let n = members.len();
        (0..n).flat_map(move |i| {
            let members = members.clone();
            (i + 1..n).map(move |j| (members[i], members[j]))
        })
    }
}

pub type Pools = BTreeMap<QueryId, Pool>;

/// Unions each run's top-`depth` items with all qrel items per query.
pub fn build_pools(runs: &[Run], qrels: &QrelSet, depth: usize) -> Result<Pools, PoolingError> {
    if depth == 0 {
        return Err(PoolingError::ZeroDepth);
    }
    let mut pools: Pools = BTreeMap::new();
    for run in runs {
        for (query, ranking) in &run.rankings {
            if ranking.is_empty() {
                continue;
            }
            let pool = pools
                .entry(query.clone())
                .or_insert_with(|| Pool::new(query.clone()));
            for r in ranking.iter().take(depth) {
                pool.add(&r.item, &run.name);
            }
        }
    }
    for (query, items) in &qrels.labels {
        let pool = pools
            .entry(query.clone())
            .or_insert_with(|| Pool::new(query.clone()));
        for item in items {
            pool.add(item, QREL_TAG);
        }
    }
    Ok(pools)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub n_pools: usize,
    pub mean_size: f64,
    pub median_size: f64,
    pub histogram: BTreeMap<usize, usize>,
    pub total_pairs: u64,
    pub qrel_only: Vec<QueryId>,
}

/// Summary statistics; `None` for an empty pool map.
pub fn pool_stats(pools: &Pools) -> Option<PoolStats> {
    if pools.is_empty() {
        return None;
    }
    let mut sizes: Vec<usize> = pools.values().map(Pool::len).collect();
    sizes.sort_unstable();
    let n = sizes.len();
    let mean = sizes.iter().sum::<usize>() as f64 / n as f64;
    let median = if n % 2 == 1 {
        sizes[n / 2] as f64
    } else {
        (sizes[n / 2 - 1] + sizes[n / 2]) as f64 / 2.0
    };
    let mut histogram = BTreeMap::new();
    for &s in &sizes {
        *histogram.entry(s).or_insert(0) += 1;
    }
    let total_pairs = sizes
        .iter()
        .map(|&s| (s as u64) * (s as u64).saturating_sub(1) / 2)
        .sum();
    let qrel_only = pools
        .values()
        .filter(|p| p.is_qrel_only())
        .map(|p| p.query.clone())
        .collect();
    Some(PoolStats {
        n_pools: n,
        mean_size: mean,
        median_size: median,
        histogram,
        total_pairs,
        qrel_only,
    })
}

/// How the single reference qrel is picked for a category split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QrelSelector {
    #[default]
    FirstInFile,
}

impl QrelSelector {
    pub fn select<'a>(&self, qrels: &'a QrelSet, query: &QueryId) -> Option<&'a ItemId> {
        match self {
            QrelSelector::FirstInFile => qrels.first_qrel(query),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySplit {
    /// Run's top item equals the selected qrel.
    pub category_a: BTreeSet<QueryId>,
    /// Run's top item differs from the selected qrel.
    pub category_b: BTreeSet<QueryId>,
    /// Labelled queries with no (or an empty) ranking.
    pub excluded: BTreeSet<QueryId>,
}

pub fn split_categories(run: &Run, qrels: &QrelSet, selector: QrelSelector) -> CategorySplit {
    let mut split = CategorySplit::default();
    for query in qrels.labels.keys() {
        let Some(selected) = selector.select(qrels, query) else {
            continue;
        };
        match run.top(query) {
            None => {
                split.excluded.insert(query.clone());
            }
            Some(top) if top == selected => {
                split.category_a.insert(query.clone());
            }
            Some(_) => {
                split.category_b.insert(query.clone());
            }
        }
    }
    split
}

/// Uniform sample without replacement among pools with at least `min_size`
/// members. Deterministic in `seed`.
pub fn sample_queries(
    pools: &Pools,
    min_size: usize,
    n: usize,
    seed: u64,
) -> Result<BTreeSet<QueryId>, PoolingError> {
    let eligible: Vec<&QueryId> = pools
        .values()
        .filter(|p| p.len() >= min_size)
        .map(|p| &p.query)
        .collect();
    if n > eligible.len() {
        return Err(PoolingError::InsufficientQueries {
            requested: n,
            eligible: eligible.len(),
            min_size,
        });
    }
    let mut rng = seed::rng(seed, "sample_queries");
    Ok(eligible
        .choose_multiple(&mut rng, n)
        .map(|q| (*q).clone())
        .collect())
}

pub fn write_pools<W: Write>(pools: &Pools, mut w: W) -> io::Result<()> {
    for pool in pools.values() {
        serde_json::to_writer(&mut w, pool)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON Lines pools, skipping blank lines and provenance records.
pub fn read_pools<R: BufRead>(reader: R) -> Result<Pools, PoolingError> {
    let mut pools = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if crate::provenance::is_skippable_jsonl(&line) {
            continue;
        }
        let pool: Pool =
            serde_json::from_str(&line).map_err(|source| PoolingError::Parse { line: i + 1, source })?;
        pools.insert(pool.query.clone(), pool);
    }
    Ok(pools)
}
