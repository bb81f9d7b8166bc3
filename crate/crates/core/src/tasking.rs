//! Assessor tasks: unordered pool pairs batched with planted quality-control
//! comparisons, shuffled, and displayed with randomized left/right placement.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Collection, QrelSet, Run};
use crate::ids::{ItemId, QueryId};
use crate::judgment_log::{LogError, LogEvent, JudgmentLog, PairKind, PreferenceJudgment};
use crate::pooling::{CategorySplit, Pools, QrelSelector};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum TaskingError {
    #[error("no text for item {item} (query {query})")]
    MissingItemText { query: QueryId, item: ItemId },
    #[error("no text for query {0}")]
    MissingQueryText(QueryId),
    #[error("QC bank has {available} entries, {required} needed per task")]
    InsufficientQc { available: usize, required: usize },
    #[error("real_per_task must be at least 1")]
    ZeroBatch,
    #[error("QC entry {line}: relevant item {item} is not a qrel for query {query}")]
    QcNotQrel {
        line: usize,
        query: QueryId,
        item: ItemId,
    },
    #[error("{source_name}:{line}: {reason}")]
    Malformed {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Stable identifier of an unordered pair for a query.
pub fn pair_id(query: &QueryId, a: &ItemId, b: &ItemId) -> String {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let h = seed::digest_hex(format!("{query}\t{lo}\t{hi}").as_bytes());
    format!("p{}", &h[..16])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentPair {
    pub pair_id: String,
    #[serde(rename = "qid")]
    pub query: QueryId,
    pub left: ItemId,
    pub right: ItemId,
    pub kind: PairKind,
    /// Displayed side holding the relevant item; QC pairs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qc_answer: Option<Side>,
    /// Whether left/right are swapped relative to the canonical orientation.
    #[serde(default)]
    pub flipped: bool,
    #[serde(default)]
    pub replica: u32,
}

impl JudgmentPair {
    /// A real pair in canonical `(smaller, larger)` orientation.
    pub fn real(query: &QueryId, a: &ItemId, b: &ItemId) -> Self {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        JudgmentPair {
            pair_id: pair_id(query, lo, hi),
            query: query.clone(),
            left: lo.clone(),
            right: hi.clone(),
            kind: PairKind::Real,
            qc_answer: None,
            flipped: false,
            replica: 0,
        }
    }

    /// A QC pair, canonically relevant-left.
    pub fn qc(entry: &QcEntry, task_id: &str, slot: usize) -> Self {
        let h = seed::digest_hex(
            format!("qc\t{task_id}\t{slot}\t{}\t{}", entry.relevant, entry.distractor).as_bytes(),
        );
        JudgmentPair {
            pair_id: format!("p{}", &h[..16]),
            query: entry.query.clone(),
            left: entry.relevant.clone(),
            right: entry.distractor.clone(),
            kind: PairKind::Qc,
            qc_answer: Some(Side::Left),
            flipped: false,
            replica: 0,
        }
    }

    pub fn flip(&mut self) {
        std::mem::swap(&mut self.left, &mut self.right);
        self.flipped = !self.flipped;
        self.qc_answer = self.qc_answer.map(Side::other);
    }

    /// Left/right in canonical orientation (flip undone).
    pub fn canonical(&self) -> (&ItemId, &ItemId) {
        if self.flipped {
            (&self.right, &self.left)
        } else {
            (&self.left, &self.right)
        }
    }

    /// `(winner, loser)` for a displayed-side answer.
    pub fn resolve(&self, choice: Side) -> (&ItemId, &ItemId) {
        match choice {
            Side::Left => (&self.left, &self.right),
            Side::Right => (&self.right, &self.left),
        }
    }

    fn unordered(&self) -> (QueryId, ItemId, ItemId) {
        let (a, b) = if self.left <= self.right {
            (&self.left, &self.right)
        } else {
            (&self.right, &self.left)
        };
        (self.query.clone(), a.clone(), b.clone())
    }
}

/// All unordered member pairs across pools, without text checks.
pub fn pool_pairs(pools: &Pools) -> Vec<JudgmentPair> {
    pools
        .values()
        .flat_map(|pool| pool.pairs().map(|(a, b)| JudgmentPair::real(&pool.query, a, b)))
        .collect()
}

/// One real pair per unordered pool pair. Fails if any text the assessor
/// would need is missing.
pub fn enumerate_pairs(pools: &Pools, collection: &Collection) -> Result<Vec<JudgmentPair>, TaskingError> {
    for pool in pools.values() {
        if pool.len() < 2 {
            continue;
        }
        if collection.query_text(&pool.query).is_none() {
            return Err(TaskingError::MissingQueryText(pool.query.clone()));
        }
        if let Some(item) = pool.members.iter().find(|m| collection.item_text(m).is_none()) {
            return Err(TaskingError::MissingItemText {
                query: pool.query.clone(),
                item: item.clone(),
            });
        }
    }
    Ok(pool_pairs(pools))
}

/// Pairs for the category check: in category A the run's top faces its
/// second item, in category B the run's top faces the selected qrel.
pub fn category_pairs(run: &Run, qrels: &QrelSet, split: &CategorySplit, selector: QrelSelector) -> Vec<JudgmentPair> {
    let a = split.category_a.iter().filter_map(|q| {
        let ranking = run.ranking(q);
        Some(JudgmentPair::real(q, &ranking.first()?.item, &ranking.get(1)?.item))
    });
    let b = split
        .category_b
        .iter()
        .filter_map(|q| Some(JudgmentPair::real(q, run.top(q)?, selector.select(qrels, q)?)));
    a.chain(b).collect()
}

/// Repeats every pair `replicas` times; replica `r > 0` gets an `-r{r}` id suffix.
pub fn replicate(pairs: &[JudgmentPair], replicas: u32) -> Vec<JudgmentPair> {
    let mut out = Vec::with_capacity(pairs.len() * replicas.max(1) as usize);
    for r in 0..replicas.max(1) {
        for p in pairs {
            let mut p = p.clone();
            if r > 0 {
                p.pair_id = format!("{}-r{r}", p.pair_id);
            }
            p.replica = r;
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcEntry {
    #[serde(rename = "qid")]
    pub query: QueryId,
    pub relevant: ItemId,
    pub distractor: ItemId,
}

/// Operator-supplied planted comparisons.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QcBank {
    pub entries: Vec<QcEntry>,
}

impl QcBank {
    pub fn load(path: &Path) -> Result<Self, TaskingError> {
        Self::parse(BufReader::new(File::open(path)?), &path.display().to_string())
    }

    /// Parses `qid \t relevant \t distractor` lines.
    pub fn parse<R: BufRead>(reader: R, source_name: &str) -> Result<Self, TaskingError> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let malformed = |reason: String| TaskingError::Malformed {
                source_name: source_name.to_string(),
                line: i + 1,
                reason,
            };
            let fields: Vec<&str> = t.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(malformed(format!("expected 3 fields, found {}", fields.len())));
            }
            let query = QueryId::new(fields[0]).map_err(|e| malformed(e.to_string()))?;
            let relevant = ItemId::new(fields[1]).map_err(|e| malformed(e.to_string()))?;
            let distractor = ItemId::new(fields[2]).map_err(|e| malformed(e.to_string()))?;
            if relevant == distractor {
                return Err(malformed("relevant and distractor are the same item".into()));
            }
            entries.push(QcEntry {
                query,
                relevant,
                distractor,
            });
        }
        Ok(QcBank { entries })
    }

    /// Checks every relevant item is a known qrel.
    pub fn validate(&self, qrels: &QrelSet) -> Result<(), TaskingError> {
        for (i, e) in self.entries.iter().enumerate() {
            if !qrels.contains(&e.query, &e.relevant) {
                return Err(TaskingError::QcNotQrel {
                    line: i + 1,
                    query: e.query.clone(),
                    item: e.relevant.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub real_per_task: usize,
    pub qc_per_task: usize,
    pub seed: u64,
}

impl TaskConfig {
    pub fn with_seed(seed: u64) -> Self {
        TaskConfig {
            real_per_task: 10,
            qc_per_task: 3,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub pairs: Vec<JudgmentPair>,
    pub seed: u64,
    /// Creation time in seconds since the epoch; absent in reproducible builds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<u64>,
    /// How many times the task was re-queued after rejection or abandonment.
    #[serde(default)]
    pub attempt: u32,
}

impl Task {
    pub fn real_pairs(&self) -> impl Iterator<Item = &JudgmentPair> {
        self.pairs.iter().filter(|p| p.kind == PairKind::Real)
    }

    /// A fresh randomization of the same pairs for a re-queued task.
    pub fn rerandomized(&self) -> Task {
        let attempt = self.attempt + 1;
        let mut pairs = self.pairs.clone();
        for p in &mut pairs {
            if p.flipped {
                p.flip();
            }
        }
        pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        let mut rng = seed::rng(self.seed, &format!("{}/attempt/{attempt}", self.task_id));
        shuffle_and_flip(&mut pairs, &mut rng);
        Task {
            task_id: self.task_id.clone(),
            pairs,
            seed: self.seed,
            created_at: self.created_at,
            attempt,
        }
    }

    /// Converts displayed-side answers into judgments (real and QC).
    pub fn judgments(
        &self,
        answers: &BTreeMap<String, Side>,
        assessor: &str,
        timestamp: u64,
    ) -> Vec<PreferenceJudgment> {
        self.pairs
            .iter()
            .filter_map(|p| {
                let choice = answers.get(&p.pair_id)?;
                let (winner, loser) = p.resolve(*choice);
                Some(PreferenceJudgment {
                    query: p.query.clone(),
                    winner: winner.clone(),
                    loser: loser.clone(),
                    assessor: assessor.to_string(),
                    task_id: self.task_id.clone(),
                    timestamp,
                    kind: p.kind,
                    replica: p.replica,
                })
            })
            .collect()
    }
}

fn shuffle_and_flip<R: Rng>(pairs: &mut [JudgmentPair], rng: &mut R) {
    pairs.shuffle(rng);
    for p in pairs.iter_mut() {
        if rng.gen_bool(0.5) {
            p.flip();
        }
    }
}

/// Batches real pairs into tasks of `real_per_task`, each with
/// `qc_per_task` QC pairs, shuffled and randomly flipped. The last task may
/// hold fewer real pairs but always carries the full QC complement.
pub fn assemble_tasks(
    pairs: &[JudgmentPair],
    bank: &QcBank,
    config: &TaskConfig,
    created_at: Option<u64>,
) -> Result<Vec<Task>, TaskingError> {
    if config.real_per_task == 0 {
        return Err(TaskingError::ZeroBatch);
    }
    if config.qc_per_task > bank.len() {
        return Err(TaskingError::InsufficientQc {
            available: bank.len(),
            required: config.qc_per_task,
        });
    }
    let mut rng = seed::rng(config.seed, "assemble_tasks");
    let mut queue: Vec<JudgmentPair> = pairs.to_vec();
    queue.shuffle(&mut rng);
    let mut queue: VecDeque<JudgmentPair> = queue.into();

    let mut tasks = Vec::new();
    while !queue.is_empty() {
        let index = tasks.len();
        let task_id = format!("task-{:x}-{index:05}", config.seed);

        // replicas of one pair never share a task
        let mut batch = Vec::with_capacity(config.real_per_task + config.qc_per_task);
        let mut used: HashSet<(QueryId, ItemId, ItemId)> = HashSet::new();
        let mut deferred = VecDeque::new();
        while batch.len() < config.real_per_task {
            let Some(p) = queue.pop_front() else { break };
            if used.insert(p.unordered()) {
                batch.push(p);
            } else {
                deferred.push_back(p);
            }
        }
        deferred.append(&mut queue);
        queue = deferred;

        for (slot, entry) in bank
            .entries
            .choose_multiple(&mut rng, config.qc_per_task)
            .enumerate()
        {
            batch.push(JudgmentPair::qc(entry, &task_id, slot));
        }
        shuffle_and_flip(&mut batch, &mut rng);
        tasks.push(Task {
            task_id,
            pairs: batch,
            seed: config.seed,
            created_at,
            attempt: 0,
        });
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum TaskVerdict {
    Accepted,
    Rejected { failed_qc: Vec<String> },
    /// Some pairs are unanswered; neither accepted nor rejected.
    Incomplete { missing: Vec<String> },
}

impl TaskVerdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, TaskVerdict::Accepted)
    }
}

/// Accepts a task only if every QC pair was answered correctly.
pub fn validate_task_result(task: &Task, answers: &BTreeMap<String, Side>) -> TaskVerdict {
    let missing: Vec<String> = task
        .pairs
        .iter()
        .filter(|p| !answers.contains_key(&p.pair_id))
        .map(|p| p.pair_id.clone())
        .collect();
    if !missing.is_empty() {
        return TaskVerdict::Incomplete { missing };
    }
    let failed_qc: Vec<String> = task
        .pairs
        .iter()
        .filter(|p| p.kind == PairKind::Qc && answers.get(&p.pair_id).copied() != p.qc_answer)
        .map(|p| p.pair_id.clone())
        .collect();
    if failed_qc.is_empty() {
        TaskVerdict::Accepted
    } else {
        TaskVerdict::Rejected { failed_qc }
    }
}

// ---------------------------------------------------------------------------
// Wire formats

/// A pair with the texts the assessor sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedPair {
    #[serde(flatten)]
    pub pair: JudgmentPair,
    pub query_text: String,
    pub left_text: String,
    pub right_text: String,
}

/// One line of the task export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedTask {
    pub task_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<u64>,
    #[serde(default)]
    pub attempt: u32,
    pub pairs: Vec<ExportedPair>,
}

impl ExportedTask {
    pub fn from_task(task: &Task, collection: &Collection) -> Result<Self, TaskingError> {
        let text = |q: &QueryId, item: &ItemId| {
            collection
                .item_text(item)
                .map(str::to_string)
                .ok_or_else(|| TaskingError::MissingItemText {
                    query: q.clone(),
                    item: item.clone(),
                })
        };
        let pairs = task
            .pairs
            .iter()
            .map(|p| {
                Ok(ExportedPair {
                    query_text: collection
                        .query_text(&p.query)
                        .ok_or_else(|| TaskingError::MissingQueryText(p.query.clone()))?
                        .to_string(),
                    left_text: text(&p.query, &p.left)?,
                    right_text: text(&p.query, &p.right)?,
                    pair: p.clone(),
                })
            })
            .collect::<Result<_, TaskingError>>()?;
        Ok(ExportedTask {
            task_id: task.task_id.clone(),
            seed: task.seed,
            created_at: task.created_at,
            attempt: task.attempt,
            pairs,
        })
    }

    pub fn task(&self) -> Task {
        Task {
            task_id: self.task_id.clone(),
            pairs: self.pairs.iter().map(|p| p.pair.clone()).collect(),
            seed: self.seed,
            created_at: self.created_at,
            attempt: self.attempt,
        }
    }

    /// Same texts, pairs reordered and flipped as in `task`.
    pub fn with_layout(&self, task: &Task) -> ExportedTask {
        let by_id: BTreeMap<&str, &ExportedPair> =
            self.pairs.iter().map(|p| (p.pair.pair_id.as_str(), p)).collect();
        let pairs = task
            .pairs
            .iter()
            .map(|p| {
                let old = by_id[p.pair_id.as_str()];
                let (left_text, right_text) = if old.pair.left == p.left {
                    (old.left_text.clone(), old.right_text.clone())
                } else {
                    (old.right_text.clone(), old.left_text.clone())
                };
                ExportedPair {
                    pair: p.clone(),
                    query_text: old.query_text.clone(),
                    left_text,
                    right_text,
                }
            })
            .collect();
        ExportedTask {
            task_id: task.task_id.clone(),
            seed: task.seed,
            created_at: task.created_at,
            attempt: task.attempt,
            pairs,
        }
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(
    reader: R,
    source_name: &str,
) -> Result<Vec<T>, TaskingError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if crate::provenance::is_skippable_jsonl(&line) {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TaskingError::Malformed {
            source_name: source_name.to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(records: &[T], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<JudgmentPair>, TaskingError> {
    read_jsonl(reader, source_name)
}

pub fn read_tasks<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<ExportedTask>, TaskingError> {
    read_jsonl(reader, source_name)
}

/// One line of answer import.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub task_id: String,
    pub assessor: String,
    pub answers: BTreeMap<String, Side>,
}

pub fn read_answers<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<AnswerRecord>, TaskingError> {
    read_jsonl(reader, source_name)
}

// ---------------------------------------------------------------------------
// Exclusions and ingest

/// Assessors who failed QC, one token per line, append-only on disk.
#[derive(Debug, Clone, Default)]
pub struct ExclusionList {
    path: Option<PathBuf>,
    assessors: BTreeSet<String>,
}

impl ExclusionList {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads the list; a missing file is an empty list.
    pub fn load(path: &Path) -> io::Result<Self> {
        let mut assessors = BTreeSet::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                let t = line.trim();
                if !t.is_empty() && !t.starts_with('#') {
                    assessors.insert(t.to_string());
                }
            }
        }
        Ok(ExclusionList {
            path: Some(path.to_path_buf()),
            assessors,
        })
    }

    pub fn contains(&self, assessor: &str) -> bool {
        self.assessors.contains(assessor)
    }

    pub fn add(&mut self, assessor: &str) -> io::Result<()> {
        if !self.assessors.insert(assessor.to_string()) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{assessor}")?;
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.assessors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assessors.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    pub incomplete: Vec<String>,
    /// Answer records from excluded assessors, ignored.
    pub excluded: Vec<String>,
    pub committed_real: usize,
    /// Rejected tasks, re-randomized for another assessor.
    #[serde(skip)]
    pub requeued: Vec<Task>,
}

/// Validates imported answers and commits accepted tasks to the log.
/// Rejected assessors are added to the exclusion list.
pub fn ingest_answers(
    tasks: &[Task],
    records: &[AnswerRecord],
    log: &mut JudgmentLog,
    exclusions: &mut ExclusionList,
    timestamp: u64,
) -> Result<IngestReport, TaskingError> {
    let by_id: BTreeMap<&str, &Task> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut report = IngestReport::default();
    for record in records {
        let task = by_id
            .get(record.task_id.as_str())
            .ok_or_else(|| TaskingError::UnknownTask(record.task_id.clone()))?;
        if exclusions.contains(&record.assessor) {
            report.excluded.push(record.task_id.clone());
            continue;
        }
        match validate_task_result(task, &record.answers) {
            TaskVerdict::Accepted => {
                let judgments = task.judgments(&record.answers, &record.assessor, timestamp);
                report.committed_real += judgments.iter().filter(|j| j.kind == PairKind::Real).count();
                let mut events: Vec<LogEvent> = judgments.into_iter().map(LogEvent::Judgment).collect();
                events.push(LogEvent::TaskAccepted {
                    task_id: task.task_id.clone(),
                    assessor: record.assessor.clone(),
                    timestamp,
                });
                log.append(events)?;
                report.accepted.push(task.task_id.clone());
            }
            TaskVerdict::Rejected { failed_qc } => {
                log.append(vec![LogEvent::TaskRejected {
                    task_id: task.task_id.clone(),
                    assessor: record.assessor.clone(),
                    failed_qc,
                    timestamp,
                }])?;
                exclusions.add(&record.assessor)?;
                report.rejected.push(task.task_id.clone());
                report.requeued.push(task.rerandomized());
            }
            TaskVerdict::Incomplete { .. } => report.incomplete.push(task.task_id.clone()),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Run;
    use crate::pooling::build_pools;
    use proptest::prelude::*;

    fn q(s: &str) -> QueryId {
        QueryId::new(s).unwrap()
    }

    fn d(s: &str) -> ItemId {
        ItemId::new(s).unwrap()
    }

    fn pools_with(members: &[(&str, &[&str])]) -> Pools {
        let runs: Vec<Run> = members
            .iter()
            .flat_map(|(qq, items)| {
                items
                    .iter()
                    .enumerate()
                    .map(move |(i, it)| Run::from_lists(format!("r{i}"), [(q(qq), vec![d(it)])]))
            })
            .collect();
        build_pools(&runs, &QrelSet::new("e"), 1).unwrap()
    }

    fn collection_for(pools: &Pools) -> Collection {
        let mut c = Collection::default();
        for pool in pools.values() {
            c.queries.insert(pool.query.clone(), format!("text of {}", pool.query));
            for m in &pool.members {
                c.items.insert(m.clone(), format!("passage {m}"));
            }
        }
        c
    }

    fn bank(n: usize) -> QcBank {
        QcBank {
            entries: (0..n)
                .map(|i| QcEntry {
                    query: q(&format!("qc{i}")),
                    relevant: d(&format!("rel{i}")),
                    distractor: d(&format!("junk{i}")),
                })
                .collect(),
        }
    }

    fn synthetic_pairs(n: usize) -> Vec<JudgmentPair> {
        (0..n)
            .map(|i| JudgmentPair::real(&q(&format!("q{i}")), &d("a"), &d("b")))
            .collect()
    }

    fn correct_answers(task: &Task) -> BTreeMap<String, Side> {
        task.pairs
            .iter()
            .map(|p| (p.pair_id.clone(), p.qc_answer.unwrap_or(Side::Left)))
            .collect()
    }

    #[test]
    fn enumerate_counts() {
        let pools = pools_with(&[("q1", &["a", "b", "c"]), ("q2", &["x"])]);
        let c = collection_for(&pools);
        let pairs = enumerate_pairs(&pools, &c).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.left < p.right && p.kind == PairKind::Real));
        assert_eq!(pairs[0].pair_id, pair_id(&q("q1"), &d("b"), &d("a")));
    }

    #[test]
    fn enumerate_requires_texts() {
        let pools = pools_with(&[("q1", &["a", "b"])]);
        let mut c = collection_for(&pools);
        c.items.remove(&d("b"));
        match enumerate_pairs(&pools, &c) {
            Err(TaskingError::MissingItemText { item, .. }) => assert_eq!(item, d("b")),
            other => panic!("{other:?}"),
        }
        // singleton pools need no text
        let single = pools_with(&[("q9", &["z"])]);
        assert!(enumerate_pairs(&single, &Collection::default()).unwrap().is_empty());
    }

    #[test]
    fn task_sizes() {
        let tasks = assemble_tasks(&synthetic_pairs(25), &bank(5), &TaskConfig::with_seed(1), None).unwrap();
        let sizes: Vec<usize> = tasks.iter().map(|t| t.pairs.len()).collect();
        assert_eq!(sizes, [13, 13, 8]);
        assert_eq!(tasks[2].real_pairs().count(), 5);

        let cfg = TaskConfig {
            qc_per_task: 0,
            ..TaskConfig::with_seed(1)
        };
        let tasks = assemble_tasks(&synthetic_pairs(25), &QcBank::default(), &cfg, None).unwrap();
        assert!(tasks.iter().all(|t| t.pairs.iter().all(|p| p.kind == PairKind::Real)));
    }

    #[test]
    fn task_errors() {
        assert!(matches!(
            assemble_tasks(&synthetic_pairs(3), &QcBank::default(), &TaskConfig::with_seed(1), None),
            Err(TaskingError::InsufficientQc { .. })
        ));
        let cfg = TaskConfig {
            real_per_task: 0,
            ..TaskConfig::with_seed(1)
        };
        assert!(matches!(
            assemble_tasks(&synthetic_pairs(3), &bank(3), &cfg, None),
            Err(TaskingError::ZeroBatch)
        ));
    }

    #[test]
    fn deterministic_export() {
        let pools = pools_with(&[("q1", &["a", "b", "c", "d"]), ("q2", &["e", "f", "g"])]);
        let mut c = collection_for(&pools);
        let b = bank(4);
        for e in &b.entries {
            c.queries.insert(e.query.clone(), "qc query".into());
            c.items.insert(e.relevant.clone(), "good".into());
            c.items.insert(e.distractor.clone(), "bad".into());
        }
        let pairs = enumerate_pairs(&pools, &c).unwrap();
        let export = |seed| {
            let tasks = assemble_tasks(&pairs, &b, &TaskConfig::with_seed(seed), None).unwrap();
            let exported: Vec<ExportedTask> =
                tasks.iter().map(|t| ExportedTask::from_task(t, &c).unwrap()).collect();
            let mut buf = Vec::new();
            write_jsonl(&exported, &mut buf).unwrap();
            buf
        };
        assert_eq!(export(9), export(9));
        assert_ne!(export(9), export(10));
        let back = read_tasks(export(9).as_slice(), "x").unwrap();
        let t = back[0].task();
        let p = &back[0].pairs[0];
        assert_eq!(p.left_text, c.items[&p.pair.left]);
        assert_eq!(t.pairs.len(), back[0].pairs.len());
    }

    #[test]
    fn verdicts() {
        let tasks = assemble_tasks(&synthetic_pairs(10), &bank(3), &TaskConfig::with_seed(3), None).unwrap();
        let task = &tasks[0];
        let mut answers = correct_answers(task);
        assert_eq!(validate_task_result(task, &answers), TaskVerdict::Accepted);

        let qc = task.pairs.iter().find(|p| p.kind == PairKind::Qc).unwrap();
        answers.insert(qc.pair_id.clone(), qc.qc_answer.unwrap().other());
        assert_eq!(
            validate_task_result(task, &answers),
            TaskVerdict::Rejected {
                failed_qc: vec![qc.pair_id.clone()]
            }
        );

        let mut partial = correct_answers(task);
        let dropped = task.pairs[4].pair_id.clone();
        partial.remove(&dropped);
        assert_eq!(
            validate_task_result(task, &partial),
            TaskVerdict::Incomplete { missing: vec![dropped] }
        );
    }

    #[test]
    fn answers_resolve_through_flips() {
        let tasks = assemble_tasks(&synthetic_pairs(10), &bank(3), &TaskConfig::with_seed(5), None).unwrap();
        let task = &tasks[0];
        assert!(task.pairs.iter().any(|p| p.flipped));
        // always choose the canonical-left item
        let answers: BTreeMap<String, Side> = task
            .pairs
            .iter()
            .map(|p| (p.pair_id.clone(), if p.flipped { Side::Right } else { Side::Left }))
            .collect();
        for j in task.judgments(&answers, "w", 0) {
            if j.kind == PairKind::Real {
                assert_eq!(j.winner, d("a"));
            } else {
                assert!(j.winner.as_str().starts_with("rel"));
            }
        }
    }

    #[test]
    fn replicas_never_share_a_task() {
        let pairs = replicate(&synthetic_pairs(4), 3);
        assert_eq!(pairs.len(), 12);
        let cfg = TaskConfig {
            real_per_task: 4,
            qc_per_task: 0,
            seed: 11,
        };
        let tasks = assemble_tasks(&pairs, &QcBank::default(), &cfg, None).unwrap();
        for t in &tasks {
            let set: HashSet<_> = t.pairs.iter().map(JudgmentPair::unordered).collect();
            assert_eq!(set.len(), t.pairs.len());
        }
        assert_eq!(tasks.iter().map(|t| t.pairs.len()).sum::<usize>(), 12);
    }

    #[test]
    fn rerandomize_keeps_pairs() {
        let tasks = assemble_tasks(&synthetic_pairs(10), &bank(3), &TaskConfig::with_seed(2), None).unwrap();
        let again = tasks[0].rerandomized();
        assert_eq!(again.attempt, 1);
        assert_eq!(again.task_id, tasks[0].task_id);
        let ids = |t: &Task| t.pairs.iter().map(|p| p.pair_id.clone()).collect::<BTreeSet<_>>();
        assert_eq!(ids(&again), ids(&tasks[0]));
        assert_ne!(again.pairs, tasks[0].pairs);
        let ans = correct_answers(&again);
        assert!(validate_task_result(&again, &ans).is_accepted());
    }

    #[test]
    fn qc_bank_parse_and_validate() {
        let bank = QcBank::parse("q1\td1\tjunk\n# c\n".as_bytes(), "bank").unwrap();
        assert_eq!(bank.len(), 1);
        let mut qrels = QrelSet::new("x");
        assert!(bank.validate(&qrels).is_err());
        qrels.insert(q("q1"), d("d1"));
        assert!(bank.validate(&qrels).is_ok());
        assert!(QcBank::parse("q1\td1\n".as_bytes(), "bank").is_err());
        assert!(QcBank::parse("q1\td1\td1\n".as_bytes(), "bank").is_err());
    }

    #[test]
    fn ingest_accepts_and_rejects() {
        let tasks = assemble_tasks(&synthetic_pairs(20), &bank(3), &TaskConfig::with_seed(4), None).unwrap();
        let good = AnswerRecord {
            task_id: tasks[0].task_id.clone(),
            assessor: "good".into(),
            answers: correct_answers(&tasks[0]),
        };
        let mut bad_answers = correct_answers(&tasks[1]);
        let qc = tasks[1].pairs.iter().find(|p| p.kind == PairKind::Qc).unwrap();
        bad_answers.insert(qc.pair_id.clone(), qc.qc_answer.unwrap().other());
        let bad = AnswerRecord {
            task_id: tasks[1].task_id.clone(),
            assessor: "bad".into(),
            answers: bad_answers,
        };
        let again = AnswerRecord {
            task_id: tasks[1].task_id.clone(),
            assessor: "bad".into(),
            answers: correct_answers(&tasks[1]),
        };
        let mut log = JudgmentLog::in_memory(1);
        let mut excl = ExclusionList::in_memory();
        let report = ingest_answers(&tasks, &[good, bad, again], &mut log, &mut excl, 0).unwrap();
        assert_eq!(report.accepted, vec![tasks[0].task_id.clone()]);
        assert_eq!(report.rejected, vec![tasks[1].task_id.clone()]);
        assert_eq!(report.excluded, vec![tasks[1].task_id.clone()]);
        assert_eq!(report.committed_real, 10);
        assert_eq!(report.requeued.len(), 1);
        assert!(excl.contains("bad"));
        assert_eq!(log.preference_set().len(), 10);
    }

    #[test]
    fn exclusion_list_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("excluded.txt");
        let mut list = ExclusionList::load(&path).unwrap();
        list.add("w9").unwrap();
        list.add("w9").unwrap();
        let again = ExclusionList::load(&path).unwrap();
        assert!(again.contains("w9"));
        assert_eq!(again.len(), 1);
    }

    proptest! {
        #[test]
        fn partition_and_flip_correctness(n in 1usize..60, per in 1usize..12, qc in 0usize..4, seed in any::<u64>()) {
            let pairs = synthetic_pairs(n);
            let cfg = TaskConfig { real_per_task: per, qc_per_task: qc, seed };
            let tasks = assemble_tasks(&pairs, &bank(4), &cfg, None).unwrap();
            prop_assert_eq!(tasks.len(), n.div_ceil(per));
            let mut seen = BTreeSet::new();
            for t in &tasks {
                prop_assert_eq!(t.pairs.iter().filter(|p| p.kind == PairKind::Qc).count(), qc);
                for p in t.real_pairs() {
                    prop_assert!(seen.insert(p.pair_id.clone()));
                    let (l, r) = p.canonical();
                    prop_assert!(l < r);
                }
                for p in t.pairs.iter().filter(|p| p.kind == PairKind::Qc) {
                    let (l, _) = p.canonical();
                    prop_assert!(l.as_str().starts_with("rel"));
                    let correct = if p.flipped { Side::Right } else { Side::Left };
                    prop_assert_eq!(p.qc_answer, Some(correct));
                }
            }
            prop_assert_eq!(seen.len(), n);
        }
    }

    #[test]
    fn category_pairs_follow_split() {
        let run = Run::from_lists("r", [(q("qa"), vec![d("x"), d("y")]), (q("qb"), vec![d("z"), d("w")])]);
        let mut qrels = QrelSet::new("dev");
        qrels.insert(q("qa"), d("x"));
        qrels.insert(q("qb"), d("w"));
        let split = crate::pooling::split_categories(&run, &qrels, QrelSelector::FirstInFile);
        let pairs = category_pairs(&run, &qrels, &split, QrelSelector::FirstInFile);
        let got: Vec<(String, String, String)> = pairs
            .iter()
            .map(|p| {
                let (qq, a, b) = p.unordered();
                (qq.to_string(), a.to_string(), b.to_string())
            })
            .collect();
        assert_eq!(
            got,
            [("qa".into(), "x".into(), "y".into()), ("qb".into(), "w".into(), "z".into())]
        );
    }
}
