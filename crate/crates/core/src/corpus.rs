//! Loading and indexing of queries, item texts, runs and qrels.
//!
//! All readers accept UTF-8 with LF or CRLF line endings. Blank lines and
//! lines starting with `#` are ignored, which lets artifacts carry a
//! provenance header.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ids::{IdError, ItemId, QueryId};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{source_name}:{line}: {reason}")]
    Malformed {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("{source_name}:{line}: item {item} appears twice for query {query}")]
    DuplicateItem {
        source_name: String,
        line: usize,
        query: QueryId,
        item: ItemId,
    },
    #[error("{source_name}:{line}: duplicate id {id}")]
    DuplicateId {
        source_name: String,
        line: usize,
        id: String,
    },
    #[error("{source_name}:{line}: empty text for id {id}")]
    EmptyText {
        source_name: String,
        line: usize,
        id: String,
    },
}

impl CorpusError {
    fn malformed(source_name: &str, line: usize, reason: impl Into<String>) -> Self {
        CorpusError::Malformed {
            source_name: source_name.to_string(),
            line,
            reason: reason.into(),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path).map(BufReader::new).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".to_string())
}

/// Iterates content lines as `(1-based line number, trimmed-of-CR text)`,
/// skipping blanks and `#` comments.
fn content_lines<'a, R: BufRead + 'a>(
    reader: R,
    source_name: &'a str,
) -> impl Iterator<Item = Result<(usize, String), CorpusError>> + 'a {
    reader
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Err(source) => Some(Err(CorpusError::Io {
                path: source_name.to_string(),
                source,
            })),
            Ok(mut l) => {
                if l.ends_with('\r') {
                    l.pop();
                }
                let t = l.trim_start();
                if t.is_empty() || t.starts_with('#') {
                    None
                } else {
                    Some(Ok((i + 1, l)))
                }
            }
        })
}

fn parse_id<T>(
    raw: &str,
    make: fn(String) -> Result<T, IdError>,
    source_name: &str,
    line: usize,
) -> Result<T, CorpusError> {
    make(raw.to_string()).map_err(|e| CorpusError::malformed(source_name, line, e.to_string()))
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunFormat {
    /// `qid Q0 docid rank score tag`
    Trec,
    /// `qid \t docid \t rank`
    Marco,
}

impl RunFormat {
    /// Guesses the format from the column count of a content line.
    pub fn detect(line: &str) -> Option<RunFormat> {
        match line.split_whitespace().count() {
            6 => Some(RunFormat::Trec),
            3 => Some(RunFormat::Marco),
            _ => None,
        }
    }
}

impl std::str::FromStr for RunFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trec" => Ok(RunFormat::Trec),
            "marco" => Ok(RunFormat::Marco),
            other => Err(format!("unknown run format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item: ItemId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// A named ranked list per query. Index `i` of a ranking holds rank `i + 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Run {
    pub name: String,
    pub rankings: BTreeMap<QueryId, Vec<RankedItem>>,
}

impl Run {
    pub fn new(name: impl Into<String>) -> Self {
        Run {
            name: name.into(),
            rankings: BTreeMap::new(),
        }
    }

    /// Builds a score-less run from ordered item lists.
    pub fn from_lists<I, L>(name: impl Into<String>, lists: I) -> Self
    where
        I: IntoIterator<Item = (QueryId, L)>,
        L: IntoIterator<Item = ItemId>,
    {
        let rankings = lists
            .into_iter()
            .map(|(q, items)| {
                let ranked = items
                    .into_iter()
                    .map(|item| RankedItem { item, score: None })
                    .collect();
                (q, ranked)
            })
            .collect();
        Run {
            name: name.into(),
            rankings,
        }
    }

    pub fn ranking(&self, query: &QueryId) -> &[RankedItem] {
        self.rankings.get(query).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The rank-1 item for a query, if any.
    pub fn top(&self, query: &QueryId) -> Option<&ItemId> {
        self.ranking(query).first().map(|r| &r.item)
    }

    /// 1-based rank of `item`, if it is ranked for `query`.
    pub fn rank_of(&self, query: &QueryId, item: &ItemId) -> Option<usize> {
        self.ranking(query)
            .iter()
            .position(|r| &r.item == item)
            .map(|i| i + 1)
    }

    pub fn queries(&self) -> impl Iterator<Item = &QueryId> {
        self.rankings.keys()
    }
}

/// Non-fatal findings while loading a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunWarning {
    /// Ranks were not exactly 1..n; the list was kept in file order.
    NonContiguousRanks { query: QueryId },
    /// Scores increase somewhere down the ranking; rank order was kept.
    ScoreNotMonotone { query: QueryId },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunLoadOptions {
    /// `None` auto-detects from the first content line.
    pub format: Option<RunFormat>,
    /// Truncate every ranking to this many items.
    pub cutoff: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub run: Run,
    pub format: RunFormat,
    pub warnings: Vec<RunWarning>,
}

pub fn load_run(path: &Path, options: RunLoadOptions) -> Result<LoadedRun, CorpusError> {
    let reader = open(path)?;
    parse_run(reader, &path.display().to_string(), &stem(path), options)
}

/// Parses a run. `default_name` is used for MARCO runs, which carry no tag.
pub fn parse_run<R: BufRead>(
    reader: R,
    source_name: &str,
    default_name: &str,
    options: RunLoadOptions,
) -> Result<LoadedRun, CorpusError> {
    struct Entry {
        rank: usize,
        item: ItemId,
        score: Option<f64>,
    }

    let mut format = options.format;
    let mut name: Option<String> = None;
    let mut per_query: BTreeMap<QueryId, Vec<Entry>> = BTreeMap::new();
    let mut seen: HashSet<(QueryId, ItemId)> = HashSet::new();

    for line in content_lines(reader, source_name) {
        let (lineno, text) = line?;
        let fmt = match format {
            Some(f) => f,
            None => {
                let f = RunFormat::detect(&text).ok_or_else(|| {
                    CorpusError::malformed(
                        source_name,
                        lineno,
                        "cannot detect run format: expected 6 (trec) or 3 (marco) columns",
                    )
                })?;
                format = Some(f);
                f
            }
        };

        let (qid, docid, rank, score, tag) = match fmt {
            RunFormat::Trec => {
                let fields: Vec<&str> = text.split_whitespace().collect();
                if fields.len() != 6 {
                    return Err(CorpusError::malformed(
                        source_name,
                        lineno,
                        format!("expected 6 fields, found {}", fields.len()),
                    ));
                }
                let score: f64 = fields[4].parse().map_err(|_| {
                    CorpusError::malformed(source_name, lineno, format!("bad score {:?}", fields[4]))
                })?;
                (fields[0], fields[2], fields[3], Some(score), Some(fields[5]))
            }
            RunFormat::Marco => {
                let fields: Vec<&str> = text.split('\t').map(str::trim).collect();
                if fields.len() != 3 {
                    return Err(CorpusError::malformed(
                        source_name,
                        lineno,
                        format!("expected 3 tab-separated fields, found {}", fields.len()),
                    ));
                }
                (fields[0], fields[1], fields[2], None, None)
            }
        };

        let query = parse_id(qid, QueryId::new, source_name, lineno)?;
        let item = parse_id(docid, ItemId::new, source_name, lineno)?;
        let rank: usize = rank.parse().map_err(|_| {
            CorpusError::malformed(source_name, lineno, format!("bad rank {rank:?}"))
        })?;
        if let (None, Some(tag)) = (&name, tag) {
            name = Some(tag.to_string());
        }
        if !seen.insert((query.clone(), item.clone())) {
            return Err(CorpusError::DuplicateItem {
                source_name: source_name.to_string(),
                line: lineno,
                query,
                item,
            });
        }
        per_query
            .entry(query)
            .or_default()
            .push(Entry { rank, item, score });
    }

    let mut warnings = Vec::new();
    let mut rankings = BTreeMap::new();
    for (query, mut entries) in per_query {
        let mut ranks: Vec<usize> = entries.iter().map(|e| e.rank).collect();
        ranks.sort_unstable();
        let contiguous = ranks.iter().enumerate().all(|(i, &r)| r == i + 1);
        if contiguous {
            entries.sort_by_key(|e| e.rank);
        } else {
            warnings.push(RunWarning::NonContiguousRanks {
                query: query.clone(),
            });
        }
        if let Some(cutoff) = options.cutoff {
            entries.truncate(cutoff);
        }
        let monotone = entries.windows(2).all(|w| match (w[0].score, w[1].score) {
            (Some(a), Some(b)) => a >= b,
            _ => true,
        });
        if !monotone {
            warnings.push(RunWarning::ScoreNotMonotone {
                query: query.clone(),
            });
        }
        let ranked = entries
            .into_iter()
            .map(|e| RankedItem {
                item: e.item,
                score: e.score,
            })
            .collect();
        rankings.insert(query, ranked);
    }

    Ok(LoadedRun {
        run: Run {
            name: name.unwrap_or_else(|| default_name.to_string()),
            rankings,
        },
        format: format.unwrap_or(RunFormat::Trec),
        warnings,
    })
}

/// Writes a run. TREC output synthesizes `n - rank + 1` for missing scores;
/// MARCO output drops scores.
pub fn write_run<W: Write>(run: &Run, format: RunFormat, mut w: W) -> io::Result<()> {
    for (query, ranking) in &run.rankings {
        let n = ranking.len();
        for (i, r) in ranking.iter().enumerate() {
            let rank = i + 1;
            match format {
                RunFormat::Trec => {
                    let score = r.score.unwrap_or((n - i) as f64);
                    writeln!(w, "{query} Q0 {} {rank} {score} {}", r.item, run.name)?;
                }
                RunFormat::Marco => writeln!(w, "{query}\t{}\t{rank}", r.item)?,
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Qrels

/// Sparse best-known answers per query, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QrelSet {
    pub name: String,
    pub labels: BTreeMap<QueryId, Vec<ItemId>>,
}

impl QrelSet {
    pub fn new(name: impl Into<String>) -> Self {
        QrelSet {
            name: name.into(),
            labels: BTreeMap::new(),
        }
    }

    /// Adds a label, ignoring repeats.
    pub fn insert(&mut self, query: QueryId, item: ItemId) {
        let items = self.labels.entry(query).or_default();
        if !items.contains(&item) {
            items.push(item);
        }
    }

    pub fn items(&self, query: &QueryId) -> &[ItemId] {
        self.labels.get(query).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, query: &QueryId, item: &ItemId) -> bool {
        self.items(query).contains(item)
    }

    /// The first label listed in the file for `query`.
    pub fn first_qrel(&self, query: &QueryId) -> Option<&ItemId> {
        self.items(query).first()
    }

    pub fn queries(&self) -> BTreeSet<QueryId> {
        self.labels.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.labels.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Restricts to the given queries.
    pub fn restrict(&self, queries: &BTreeSet<QueryId>) -> QrelSet {
        QrelSet {
            name: self.name.clone(),
            labels: self
                .labels
                .iter()
                .filter(|(q, _)| queries.contains(*q))
                .map(|(q, v)| (q.clone(), v.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedQrels {
    pub qrels: QrelSet,
    /// Lines with `rel <= 0`.
    pub skipped: usize,
}

pub fn load_qrels(path: &Path) -> Result<LoadedQrels, CorpusError> {
    let reader = open(path)?;
    parse_qrels(reader, &path.display().to_string(), &stem(path))
}

pub fn parse_qrels<R: BufRead>(
    reader: R,
    source_name: &str,
    name: &str,
) -> Result<LoadedQrels, CorpusError> {
    let mut qrels = QrelSet::new(name);
    let mut skipped = 0;
    for line in content_lines(reader, source_name) {
        let (lineno, text) = line?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(CorpusError::malformed(
                source_name,
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let query = parse_id(fields[0], QueryId::new, source_name, lineno)?;
        let item = parse_id(fields[2], ItemId::new, source_name, lineno)?;
        let rel: i64 = fields[3].parse().map_err(|_| {
            CorpusError::malformed(source_name, lineno, format!("bad relevance {:?}", fields[3]))
        })?;
        if rel <= 0 {
            skipped += 1;
            continue;
        }
        if qrels.contains(&query, &item) {
            return Err(CorpusError::DuplicateItem {
                source_name: source_name.to_string(),
                line: lineno,
                query,
                item,
            });
        }
        qrels.insert(query, item);
    }
    Ok(LoadedQrels { qrels, skipped })
}

/// Writes `qid 0 docid 1` lines, preserving per-query order.
pub fn write_qrels<W: Write>(qrels: &QrelSet, mut w: W) -> io::Result<()> {
    for (query, items) in &qrels.labels {
        for item in items {
            writeln!(w, "{query} 0 {item} 1")?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Collection

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Collection {
    pub items: BTreeMap<ItemId, String>,
    pub queries: BTreeMap<QueryId, String>,
}

/// Ids referenced by runs or qrels that have no text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MissingTexts {
    pub items: Vec<ItemId>,
    pub queries: Vec<QueryId>,
}

impl MissingTexts {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty() && self.queries.is_empty()
    }
}

impl Collection {
    pub fn item_text(&self, item: &ItemId) -> Option<&str> {
        self.items.get(item).map(String::as_str)
    }

    pub fn query_text(&self, query: &QueryId) -> Option<&str> {
        self.queries.get(query).map(String::as_str)
    }

    pub fn missing_texts(&self, runs: &[Run], qrels: &[&QrelSet]) -> MissingTexts {
        let mut items = BTreeSet::new();
        let mut queries = BTreeSet::new();
        for run in runs {
            for (q, ranking) in &run.rankings {
                if !self.queries.contains_key(q) {
                    queries.insert(q.clone());
                }
                for r in ranking {
                    if !self.items.contains_key(&r.item) {
                        items.insert(r.item.clone());
                    }
                }
            }
        }
        for set in qrels {
            for (q, labels) in &set.labels {
                if !self.queries.contains_key(q) {
                    queries.insert(q.clone());
                }
                for item in labels {
                    if !self.items.contains_key(item) {
                        items.insert(item.clone());
                    }
                }
            }
        }
        MissingTexts {
            items: items.into_iter().collect(),
            queries: queries.into_iter().collect(),
        }
    }
}

pub fn load_collection(items_path: &Path, queries_path: &Path) -> Result<Collection, CorpusError> {
    let items = parse_texts(open(items_path)?, &items_path.display().to_string(), ItemId::new)?;
    let queries = parse_texts(
        open(queries_path)?,
        &queries_path.display().to_string(),
        QueryId::new,
    )?;
    Ok(Collection { items, queries })
}

/// Parses `id \t text` lines.
pub fn parse_texts<R: BufRead, T: Ord + Clone>(
    reader: R,
    source_name: &str,
    make: fn(String) -> Result<T, IdError>,
) -> Result<BTreeMap<T, String>, CorpusError> {
    let mut out = BTreeMap::new();
    for line in content_lines(reader, source_name) {
        let (lineno, text) = line?;
        let (id, body) = text.split_once('\t').ok_or_else(|| {
            CorpusError::malformed(source_name, lineno, "expected `id<TAB>text`")
        })?;
        let id_str = id.trim();
        let key = parse_id(id_str, make, source_name, lineno)?;
        let body = body.trim();
        if body.is_empty() {
            return Err(CorpusError::EmptyText {
                source_name: source_name.to_string(),
                line: lineno,
                id: id_str.to_string(),
            });
        }
        if out.insert(key, body.to_string()).is_some() {
            return Err(CorpusError::DuplicateId {
                source_name: source_name.to_string(),
                line: lineno,
                id: id_str.to_string(),
            });
        }
    }
    Ok(out)
}
