use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// The control strategies a completion can come from. External model
/// outputs are recorded as `prompt_only` with the model name as variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PromptOnly,
    Filter,
    Ctrlg,
    Sft,
    Dpo,
    Inlp,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::PromptOnly,
        Strategy::Filter,
        Strategy::Ctrlg,
        Strategy::Sft,
        Strategy::Dpo,
        Strategy::Inlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::PromptOnly => "prompt_only",
            Strategy::Filter => "filter",
            Strategy::Ctrlg => "ctrlg",
            Strategy::Sft => "sft",
            Strategy::Dpo => "dpo",
            Strategy::Inlp => "inlp",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// One generated sentence and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub method: Strategy,
    pub variant: String,
    pub occupation: String,
    pub seed: u64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
    /// Set when the sentence missed the word window after every allowed
    /// regeneration attempt.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub out_of_range: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ingested {
    pub records: Vec<CompletionRecord>,
    pub skipped: Vec<Skipped>,
}

/// Reads completion records from a JSONL file.
///
/// A line that does not parse (including an unknown method) aborts with
/// its 1-based line number. A record whose text is blank is left out and
/// listed in `skipped`. Blank lines are ignored.
pub fn ingest_external(path: &Path) -> Result<Ingested, RecordError> {
    let io = |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Ingested::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CompletionRecord =
            serde_json::from_str(&line).map_err(|e| RecordError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if record.text.trim().is_empty() {
            out.skipped.push(Skipped {
                line: i + 1,
                reason: "empty text".into(),
            });
            continue;
        }
        out.records.push(record);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[CompletionRecord]) -> std::io::Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    write_records_to(&mut f, records)?;
    f.flush()
}

pub fn write_records_to<W: Write>(mut w: W, records: &[CompletionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
