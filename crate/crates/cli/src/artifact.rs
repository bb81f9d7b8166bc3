//! Reading inputs and writing provenance-stamped outputs.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use prefqrels_core::corpus::{self, load_qrels, load_run, QrelSet, Run, RunFormat, RunLoadOptions};
use prefqrels_core::ids::QueryId;
use prefqrels_core::judgment_log::JudgmentLog;
use prefqrels_core::pooling::{read_pools, Pools};
use prefqrels_core::provenance::Provenance;
use serde::Serialize;
use serde_json::Value;

pub const TOOL: &str = "prefqrels";

/// Invocation-wide settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub command: Vec<String>,
    pub epoch: Option<u64>,
}

impl Ctx {
    pub fn provenance(&self, inputs: &[&Path], config: Value) -> Result<Provenance> {
        let mut p = Provenance::new(TOOL, env!("CARGO_PKG_VERSION"), self.command.clone()).with_config(config);
        for path in inputs {
            p.add_input(path)
                .with_context(|| format!("reading {}", path.display()))?;
        }
        Ok(p)
    }

    /// `--epoch` when given, otherwise the wall clock.
    pub fn now(&self) -> u64 {
        self.epoch.unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().with_context(|| format!("writing {}", path.display()))
}

/// Line-oriented text with a `# provenance` first line.
pub fn write_text(path: &Path, prov: &Provenance, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    prov.write_comment(&mut w)?;
    body(&mut w).with_context(|| format!("writing {}", path.display()))?;
    finish(w, path)
}

/// JSON Lines with a provenance record first.
pub fn write_jsonl<T: Serialize>(path: &Path, prov: &Provenance, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    prov.write_jsonl(&mut w)?;
    prefqrels_core::tasking::write_jsonl(records, &mut w).with_context(|| format!("writing {}", path.display()))?;
    finish(w, path)
}

/// A JSON object with a `_provenance` member.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, value: &T) -> Result<()> {
    let mut obj = match serde_json::to_value(value)? {
        Value::Object(m) => m,
        other => {
            let mut m = serde_json::Map::new();
            m.insert("data".into(), other);
            m
        }
    };
    obj.insert(prefqrels_core::provenance::JSONL_KEY.into(), serde_json::to_value(prov)?);
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &obj)?;
    writeln!(w)?;
    finish(w, path)
}

/// Markdown with the provenance in an HTML comment.
pub fn write_markdown(path: &Path, prov: &Provenance, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "<!-- provenance {} -->", serde_json::to_string(prov)?)?;
    body(&mut w).with_context(|| format!("writing {}", path.display()))?;
    finish(w, path)
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

pub fn load_runs(paths: &[PathBuf], format: Option<RunFormat>, cutoff: Option<usize>) -> Result<Vec<Run>> {
    let mut runs = Vec::new();
    let mut names = BTreeSet::new();
    for path in paths {
        let loaded = load_run(path, RunLoadOptions { format, cutoff })?;
        for w in &loaded.warnings {
            eprintln!("warning: {}: {w:?}", path.display());
        }
        anyhow::ensure!(
            names.insert(loaded.run.name.clone()),
            "{}: run name {:?} is used by another run",
            path.display(),
            loaded.run.name
        );
        runs.push(loaded.run);
    }
    Ok(runs)
}

pub fn load_qrel_set(path: &Path) -> Result<QrelSet> {
    let loaded = load_qrels(path)?;
    if loaded.skipped > 0 {
        eprintln!(
            "note: {}: skipped {} non-positive judgments",
            path.display(),
            loaded.skipped
        );
    }
    Ok(loaded.qrels)
}

pub fn load_pools(path: &Path) -> Result<Pools> {
    read_pools(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// One query id per line; `#` lines and blanks are skipped.
pub fn load_query_list(path: &Path) -> Result<BTreeSet<QueryId>> {
    let mut out = BTreeSet::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let q = QueryId::new(t).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.insert(q);
    }
    Ok(out)
}

pub fn write_query_list(path: &Path, prov: &Provenance, queries: &BTreeSet<QueryId>) -> Result<()> {
    write_text(path, prov, |w| {
        for q in queries {
            writeln!(w, "{q}")?;
        }
        Ok(())
    })
}

pub fn write_qrel_file(path: &Path, prov: &Provenance, qrels: &QrelSet) -> Result<()> {
    write_text(path, prov, |w| corpus::write_qrels(qrels, w))
}

pub fn open_log(path: &Path, replicas: u32) -> Result<JudgmentLog> {
    let log = JudgmentLog::open(path, replicas).with_context(|| format!("opening log {}", path.display()))?;
    if log.had_torn_tail() {
        eprintln!("warning: {}: discarded an incomplete final record", path.display());
    }
    Ok(log)
}

/// Reads a log without holding it open for writing.
pub fn read_log(path: &Path, replicas: u32) -> Result<JudgmentLog> {
    JudgmentLog::replay(open(path)?, replicas).with_context(|| format!("reading log {}", path.display()))
}
