//! JSONL dataset files: one labeled sequence per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DataError, SkeletonSequence};

/// Loads a dataset where each line is one JSON-encoded [`SkeletonSequence`].
///
/// Blank lines are skipped. Parse and validation failures carry the
/// 1-based line number.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<SkeletonSequence>, DataError> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: SkeletonSequence = serde_json::from_str(&line)
            .map_err(|e| DataError::Line { line: i + 1, msg: e.to_string() })?;
        seq.validate().map_err(|msg| DataError::Line { line: i + 1, msg })?;
        out.push(seq);
    }
    Ok(out)
}

/// Writes sequences as JSONL, one record per line.
pub fn save_jsonl(path: impl AsRef<Path>, sequences: &[SkeletonSequence]) -> Result<(), DataError> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    for seq in sequences {
        let line = serde_json::to_string(seq)
            .map_err(|e| DataError::Invalid(format!("serialize: {e}")))?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
