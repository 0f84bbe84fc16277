//! Per-task label tables stored as `case_id,label` CSV rows.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use kneemri_core::Task;

use crate::error::{IoContext, PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    pub task: Task,
    pub entries: BTreeMap<String, u8>,
}

impl LabelTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<u8> {
        self.entries.get(case_id).copied()
    }
}

/// Reads a label CSV. A first row whose label column is not a number is
/// taken to be a header and skipped.
pub fn load_labels(path: &Path, task: Task) -> Result<LabelTable> {
    let file = File::open(path).at(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse = |line: usize, reason: String| PipelineError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut entries = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| parse(line, e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 2 {
            return Err(parse(line, format!("expected 2 fields, got {}", record.len())));
        }
        let (id, raw) = (&record[0], &record[1]);
        let label: u8 = match raw.parse::<i64>() {
            Ok(v @ (0 | 1)) => v as u8,
            Ok(v) => return Err(parse(line, format!("label must be 0 or 1, got {v}"))),
            Err(_) if line == 1 => continue,
            Err(_) => return Err(parse(line, format!("label must be 0 or 1, got {raw:?}"))),
        };
        if id.is_empty() {
            return Err(parse(line, "empty case id".into()));
        }
        if entries.insert(id.to_string(), label).is_some() {
            return Err(PipelineError::Integrity {
                path: path.to_path_buf(),
                case_id: id.to_string(),
            });
        }
    }
    Ok(LabelTable { task, entries })
}

/// Writes rows in case-id order without a header.
pub fn write_labels(path: &Path, table: &LabelTable) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).at(path)?);
    for (id, label) in &table.entries {
        writeln!(out, "{id},{label}").at(path)?;
    }
    out.flush().at(path)
}
