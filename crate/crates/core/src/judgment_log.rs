//! Append-only JSON Lines log of accepted judgments and task lifecycle
//! events. The log is the only input aggregation and metrics read from.
//!
//! Every line is one [`LogEntry`]: a `seq` number plus a tagged event. On
//! open, the file is replayed; a torn final line (no trailing newline and not
//! parseable) is treated as an interrupted write and truncated away.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ids::{ItemId, QueryId};
use crate::pooling::Pools;
use crate::seed::digest_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Real,
    Qc,
}

/// One forced-choice outcome between two items for a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceJudgment {
    #[serde(rename = "qid")]
    pub query: QueryId,
    pub winner: ItemId,
    pub loser: ItemId,
    pub assessor: String,
    pub task_id: String,
    pub timestamp: u64,
    pub kind: PairKind,
    #[serde(default)]
    pub replica: u32,
}

impl PreferenceJudgment {
    /// The unordered pair as `(smaller, larger)`.
    pub fn canonical_pair(&self) -> (&ItemId, &ItemId) {
        canonical(&self.winner, &self.loser)
    }

    pub fn involves(&self, a: &ItemId, b: &ItemId) -> bool {
        (&self.winner == a && &self.loser == b) || (&self.winner == b && &self.loser == a)
    }
}

pub(crate) fn canonical<'a>(a: &'a ItemId, b: &'a ItemId) -> (&'a ItemId, &'a ItemId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Judgment(PreferenceJudgment),
    TaskAccepted {
        task_id: String,
        assessor: String,
        timestamp: u64,
    },
    TaskRejected {
        task_id: String,
        assessor: String,
        failed_qc: Vec<String>,
        timestamp: u64,
    },
    /// Early exit; `answered` pairs count toward a prorated payment report.
    TaskAbandoned {
        task_id: String,
        assessor: String,
        answered: usize,
        timestamp: u64,
    },
    /// The best-known answer for a query changed (or was confirmed).
    QrelUpdate {
        #[serde(rename = "qid")]
        query: QueryId,
        previous: ItemId,
        best: ItemId,
        timestamp: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub event: LogEvent,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("judgment for ({query}, {a}, {b}) replica {replica} already recorded")]
    Conflict {
        query: QueryId,
        a: ItemId,
        b: ItemId,
        replica: u32,
    },
    #[error("replica index {replica} exceeds configured replicas {replicas}")]
    ReplicaOutOfRange { replica: u32, replicas: u32 },
    #[error("judgment for query {query} names {item}, which is not in its pool")]
    OutsidePool { query: QueryId, item: ItemId },
    #[error("judgment for query {query} has winner == loser ({item})")]
    SelfComparison { query: QueryId, item: ItemId },
    #[error("log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

type PairKey = (QueryId, ItemId, ItemId, u32);

/// Single-writer append-only log.
#[derive(Debug)]
pub struct JudgmentLog {
    path: Option<PathBuf>,
    file: Option<File>,
    entries: Vec<LogEntry>,
    replicas: u32,
    keys: HashSet<PairKey>,
    pools: Option<Pools>,
    torn_tail: bool,
}

impl JudgmentLog {
    /// A log that lives only in memory.
    pub fn in_memory(replicas: u32) -> Self {
        JudgmentLog {
            path: None,
            file: None,
            entries: Vec::new(),
            replicas: replicas.max(1),
            keys: HashSet::new(),
            pools: None,
            torn_tail: false,
        }
    }

    /// Opens (creating if needed) and replays a log file.
    pub fn open(path: &Path, replicas: u32) -> Result<Self, LogError> {
        let mut log = JudgmentLog::in_memory(replicas);
        if path.exists() {
            let bytes = std::fs::read(path)?;
            let valid_len = log.replay_bytes(&bytes)?;
            if valid_len < bytes.len() {
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(valid_len as u64)?;
                f.sync_all()?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        log.path = Some(path.to_path_buf());
        log.file = Some(file);
        Ok(log)
    }

    /// Rebuilds a log from bytes without attaching a file.
    pub fn replay<R: BufRead>(mut reader: R, replicas: u32) -> Result<Self, LogError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let mut log = JudgmentLog::in_memory(replicas);
        log.replay_bytes(&bytes)?;
        Ok(log)
    }

    /// Returns the length of the valid prefix.
    fn replay_bytes(&mut self, bytes: &[u8]) -> Result<usize, LogError> {
        let mut offset = 0;
        let mut lineno = 0;
        while offset < bytes.len() {
            lineno += 1;
            let rest = &bytes[offset..];
            let (line, consumed, terminated) = match rest.iter().position(|&b| b == b'\n') {
                Some(i) => (&rest[..i], i + 1, true),
                None => (rest, rest.len(), false),
            };
            let text = std::str::from_utf8(line)
                .map_err(|e| LogError::Corrupt {
                    line: lineno,
                    reason: e.to_string(),
                })?
                .trim();
            if text.is_empty() || crate::provenance::is_skippable_jsonl(text) {
                offset += consumed;
                continue;
            }
            let entry: LogEntry = match serde_json::from_str(text) {
                Ok(e) => e,
                Err(_) if !terminated => {
                    self.torn_tail = true;
                    return Ok(offset);
                }
                Err(e) => {
                    return Err(LogError::Corrupt {
                        line: lineno,
                        reason: e.to_string(),
                    })
                }
            };
            let expected = self.next_seq();
            if entry.seq != expected {
                return Err(LogError::Corrupt {
                    line: lineno,
                    reason: format!("sequence {} where {} expected", entry.seq, expected),
                });
            }
            self.check(std::slice::from_ref(&entry.event))?;
            self.index(&entry.event);
            self.entries.push(entry);
            offset += consumed;
        }
        Ok(offset)
    }

    /// Rejects real judgments that name items outside their query's pool.
    pub fn restrict_to_pools(&mut self, pools: Pools) {
        self.pools = Some(pools);
    }

    pub fn replicas(&self) -> u32 {
        self.replicas
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Whether an interrupted final write was discarded during replay.
    pub fn had_torn_tail(&self) -> bool {
        self.torn_tail
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn next_seq(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.seq + 1)
    }

    fn key(j: &PreferenceJudgment) -> PairKey {
        let (a, b) = j.canonical_pair();
        (j.query.clone(), a.clone(), b.clone(), j.replica)
    }

    fn check(&self, events: &[LogEvent]) -> Result<(), LogError> {
        let mut batch: HashSet<PairKey> = HashSet::new();
        for event in events {
            let LogEvent::Judgment(j) = event else {
                continue;
            };
            if j.winner == j.loser {
                return Err(LogError::SelfComparison {
                    query: j.query.clone(),
                    item: j.winner.clone(),
                });
            }
            if j.kind != PairKind::Real {
                continue;
            }
            if j.replica >= self.replicas {
                return Err(LogError::ReplicaOutOfRange {
                    replica: j.replica,
                    replicas: self.replicas,
                });
            }
            if let Some(pools) = &self.pools {
                let pool = pools.get(&j.query);
                for item in [&j.winner, &j.loser] {
                    if !pool.is_some_and(|p| p.contains(item)) {
                        return Err(LogError::OutsidePool {
                            query: j.query.clone(),
                            item: item.clone(),
                        });
                    }
                }
            }
            let key = Self::key(j);
            if self.keys.contains(&key) || !batch.insert(key.clone()) {
                return Err(LogError::Conflict {
                    query: key.0,
                    a: key.1,
                    b: key.2,
                    replica: key.3,
                });
            }
        }
        Ok(())
    }

    fn index(&mut self, event: &LogEvent) {
        if let LogEvent::Judgment(j) = event {
            if j.kind == PairKind::Real {
                self.keys.insert(Self::key(j));
            }
        }
    }

    /// Appends a batch atomically: either every event is committed or none.
    /// Returns the sequence number of the last committed entry.
    pub fn append(&mut self, events: Vec<LogEvent>) -> Result<Option<u64>, LogError> {
        if events.is_empty() {
            return Ok(self.entries.last().map(|e| e.seq));
        }
        self.check(&events)?;
        let first = self.next_seq();
        let entries: Vec<LogEntry> = events
            .into_iter()
            .enumerate()
            .map(|(i, event)| LogEntry {
                seq: first + i as u64,
                event,
            })
            .collect();
        if let Some(file) = self.file.as_mut() {
            let mut buf = Vec::new();
            for e in &entries {
                serde_json::to_writer(&mut buf, e).map_err(io::Error::from)?;
                buf.push(b'\n');
            }
            file.write_all(&buf)?;
            file.sync_data()?;
        }
        for e in &entries {
            self.index(&e.event);
        }
        let last = entries.last().map(|e| e.seq);
        self.entries.extend(entries);
        Ok(last)
    }

    /// Accepted real judgments, indexed by query and unordered pair.
    pub fn preference_set(&self) -> PreferenceSet {
        PreferenceSet::from_judgments(self.entries.iter().filter_map(|e| match &e.event {
            LogEvent::Judgment(j) => Some(j.clone()),
            _ => None,
        }))
    }

    /// Writes the log with assessor tokens replaced by salted hashes.
    pub fn write_deidentified<W: Write>(&self, salt: &str, mut w: W) -> io::Result<()> {
        for entry in &self.entries {
            let mut entry = entry.clone();
            match &mut entry.event {
                LogEvent::Judgment(PreferenceJudgment { assessor, .. })
                | LogEvent::TaskAccepted { assessor, .. }
                | LogEvent::TaskRejected { assessor, .. }
                | LogEvent::TaskAbandoned { assessor, .. } => *assessor = pseudonym(salt, assessor),
                LogEvent::QrelUpdate { .. } => {}
            }
            serde_json::to_writer(&mut w, &entry)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Salted, truncated SHA-256 of an assessor token.
pub fn pseudonym(salt: &str, assessor: &str) -> String {
    digest_hex(format!("{salt}\u{0}{assessor}").as_bytes())[..16].to_string()
}

/// Orientation-free outcome of a judged pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub winner: ItemId,
    pub loser: ItemId,
}

/// Vote tallies for `(smaller, larger)`: `[wins for smaller, wins for larger]`.
type Tally = [u32; 2];

/// Real judgments grouped by query, with majority-vote lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreferenceSet {
    judgments: BTreeMap<QueryId, Vec<PreferenceJudgment>>,
    votes: BTreeMap<QueryId, BTreeMap<(ItemId, ItemId), Tally>>,
}

impl PreferenceSet {
    /// Builds a set from judgments; QC judgments are dropped.
    pub fn from_judgments<I: IntoIterator<Item = PreferenceJudgment>>(judgments: I) -> Self {
        let mut set = PreferenceSet::default();
        for j in judgments {
            set.insert(j);
        }
        set
    }

    pub fn insert(&mut self, j: PreferenceJudgment) {
        if j.kind != PairKind::Real || j.winner == j.loser {
            return;
        }
        let (a, b) = j.canonical_pair();
        let slot = usize::from(&j.winner != a);
        let key = (a.clone(), b.clone());
        self.votes.entry(j.query.clone()).or_default().entry(key).or_insert([0, 0])[slot] += 1;
        self.judgments.entry(j.query.clone()).or_default().push(j);
    }

    /// Majority outcome for the unordered pair; `None` if unjudged or tied.
    pub fn lookup(&self, query: &QueryId, a: &ItemId, b: &ItemId) -> Option<Outcome> {
        let (lo, hi) = canonical(a, b);
        let tally = self.votes.get(query)?.get(&(lo.clone(), hi.clone()))?;
        decide(lo, hi, tally)
    }

    /// All decided pairs for a query, in canonical pair order.
    pub fn outcomes(&self, query: &QueryId) -> Vec<Outcome> {
        self.votes
            .get(query)
            .map(|pairs| {
                pairs
                    .iter()
                    .filter_map(|((lo, hi), tally)| decide(lo, hi, tally))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn judgments(&self, query: &QueryId) -> &[PreferenceJudgment] {
        self.judgments.get(query).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn queries(&self) -> impl Iterator<Item = &QueryId> {
        self.judgments.keys()
    }

    /// Number of stored real judgments (replicas counted individually).
    pub fn len(&self) -> usize {
        self.judgments.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Writes `qid \t winner \t loser` for every decided pair.
    pub fn write_pairs<W: Write>(&self, mut w: W) -> io::Result<()> {
        for query in self.votes.keys() {
            for o in self.outcomes(query) {
                writeln!(w, "{query}\t{}\t{}", o.winner, o.loser)?;
            }
        }
        Ok(())
    }
}

fn decide(lo: &ItemId, hi: &ItemId, tally: &Tally) -> Option<Outcome> {
    use std::cmp::Ordering;
    match tally[0].cmp(&tally[1]) {
        Ordering::Greater => Some(Outcome {
            winner: lo.clone(),
            loser: hi.clone(),
        }),
        Ordering::Less => Some(Outcome {
            winner: hi.clone(),
            loser: lo.clone(),
        }),
        Ordering::Equal => None,
    }
}
