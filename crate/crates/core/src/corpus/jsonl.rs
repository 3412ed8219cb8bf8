use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::CorpusError;

pub const SCHEMA_VERSION: u32 = 1;

/// Reads a JSON-lines file, returning each row with its 1-based line number.
/// Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::format(path, line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| CorpusError::format(path, line_no, e.to_string()))?;
        rows.push((line_no, row));
    }
    Ok(rows)
}

pub fn write_jsonl<'a, T, I>(path: &Path, rows: I) -> Result<(), CorpusError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = T>,
{
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| CorpusError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn check_schema(path: &Path, line: usize, schema: u32) -> Result<(), CorpusError> {
    if schema != SCHEMA_VERSION {
        return Err(CorpusError::format(
            path,
            line,
            format!("unsupported schema {schema}, expected {SCHEMA_VERSION}"),
        ));
    }
    Ok(())
}
