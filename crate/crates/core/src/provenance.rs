//! Provenance headers embedded in every artifact the pipeline writes.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::seed::digest_hex;

/// JSON Lines key that marks a provenance record.
pub const JSONL_KEY: &str = "_provenance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    /// Input path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(tool: &str, version: &str, command: Vec<String>) -> Self {
        Provenance {
            tool: tool.to_string(),
            version: version.to_string(),
            command,
            inputs: BTreeMap::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }

    /// Records the digest of an input file.
    pub fn add_input(&mut self, path: &Path) -> io::Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs
            .insert(path.display().to_string(), digest_hex(&bytes));
        Ok(())
    }

    /// `# provenance {...}` for line-oriented text formats.
    pub fn write_comment<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# provenance {}", serde_json::to_string(self)?)
    }

    /// `{"_provenance": {...}}` as the first record of a JSON Lines file.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let record = serde_json::json!({ JSONL_KEY: self });
        writeln!(w, "{}", serde_json::to_string(&record)?)
    }
}

/// True for blank lines and provenance records in JSON Lines input.
pub fn is_skippable_jsonl(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with(&format!("{{\"{JSONL_KEY}\""))
}
