//! Corpus ingestion and benchmark construction.
//!
//! The corpus file format is line-delimited: one record per line with fields
//! `id` (string), `tokens` (array of strings) and `triggers` (array of
//! `{start, end, label}` with end-exclusive token indices), UTF-8.

pub mod benchmark;
pub mod synthetic;

pub use benchmark::{
    accumulate_test, build_benchmark, Benchmark, BuildParams, Manifest, TaskSplit,
};
pub use synthetic::{gen_synthetic_corpus, GenParams};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Reserved label for non-trigger candidates.
pub const NA_LABEL: &str = "NA";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// One sentence with its gold trigger spans; the unit of training and
/// evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub triggers: Vec<Trigger>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let fail = |msg: String| {
            Err(Error::Validation {
                id: self.id.clone(),
                msg,
            })
        };
        if self.id.is_empty() {
            return fail("empty instance id".to_string());
        }
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(self.triggers.len());
        for t in &self.triggers {
            if t.label.is_empty() {
                return fail("empty trigger label".to_string());
            }
            if t.label == NA_LABEL {
                return fail(format!("trigger label `{NA_LABEL}` is reserved"));
            }
            if t.start >= t.end || t.end > n {
                return fail(format!(
                    "invalid span ({}, {}) for {n} tokens",
                    t.start, t.end
                ));
            }
            spans.push((t.start, t.end));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return fail(format!(
                    "overlapping trigger spans {:?} and {:?}",
                    w[0], w[1]
                ));
            }
        }
        Ok(())
    }

    /// True when the single-token span (pos, pos+1) intersects a gold trigger.
    pub fn position_in_trigger(&self, pos: usize) -> bool {
        self.triggers.iter().any(|t| t.start <= pos && pos < t.end)
    }
}

/// A scored span: a gold trigger or a sampled non-trigger ("NA") span.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub instance_id: String,
    pub start: usize,
    pub end: usize,
    pub gold: String,
}

impl Candidate {
    pub fn is_na(&self) -> bool {
        self.gold == NA_LABEL
    }

    pub fn span_key(&self) -> (String, usize, usize) {
        (self.instance_id.clone(), self.start, self.end)
    }
}

/// Parse the line-delimited corpus format. Ordering is file order; every
/// instance is validated. Blank lines are permitted and skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

/// Write instances in the canonical one-record-per-line form.
pub fn save_corpus(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut file, inst)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Canonical serialization used for corpus checksums, independent of how the
/// source file was formatted.
pub fn corpus_canonical_bytes(instances: &[Instance]) -> Vec<u8> {
    let mut buf = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut buf, inst).expect("instance serializes");
        buf.push(b'\n');
    }
    buf
}
