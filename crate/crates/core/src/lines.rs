//! Shared line-oriented input: one record per line (CSV or JSONL), errors
//! carrying file and line number, optional lenient mode that skips bad lines.

use crate::error::Result;
use std::io::BufRead;
use std::path::Path;

/// Lines skipped in lenient mode: (1-based line number, error message).
pub type Skipped = Vec<(usize, String)>;

/// Read `path` line by line, parsing each non-empty line with `parse`.
///
/// A first line equal to `header` (if given) is skipped. In strict mode the
/// first parse failure aborts with the file and line attached; in lenient
/// mode failures are collected and returned alongside the records.
pub fn read_lines<T>(
    path: &Path,
    header: Option<&str>,
    lenient: bool,
    mut parse: impl FnMut(&str) -> Result<T>,
) -> Result<(Vec<T>, Skipped)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let shown = path.to_string_lossy();
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if line_no == 1 && header == Some(line) {
            continue;
        }
        match parse(line) {
            Ok(rec) => out.push(rec),
            Err(e) if lenient => skipped.push((line_no, e.to_string())),
            Err(e) => return Err(e.at(&shown, line_no)),
        }
    }
    Ok((out, skipped))
}
