//! CSV ingestion into typed tables.
//!
//! A column is numeric when its first cell parses as a finite number and it
//! is not listed as categorical; every later cell must then parse too.
//! Lines starting with `#` are skipped, so files written by `simulate` read
//! back directly.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use driftlab_core::data::{Column, DatasetCollection, Table};

use crate::config::DataConfig;
use crate::error::{CliError, Result};

/// Read one CSV file; the table is named after the file stem.
pub fn read_table(path: &Path, categorical: &[String]) -> Result<Table> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = rdr.byte_headers().map_err(|e| csv_error(path, e))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(CliError::ingest(path, None, None, "file is empty (no header row)"));
    }
    let header_line = rdr.position().line().saturating_sub(1).max(1);
    let mut names = Vec::with_capacity(header.len());
    for (j, raw) in header.iter().enumerate() {
        let name = std::str::from_utf8(raw).map_err(|_| {
            CliError::ingest(path, Some(header_line), Some(&format!("#{}", j + 1)), "header is not valid UTF-8")
        })?;
        if name.is_empty() {
            return Err(CliError::ingest(path, Some(header_line), Some(&format!("#{}", j + 1)), "empty column name"));
        }
        if names.contains(&name.to_string()) {
            return Err(CliError::ingest(path, Some(header_line), Some(name), "duplicate column name"));
        }
        names.push(name.to_string());
    }

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    let mut lines = Vec::new();
    let mut record = csv::ByteRecord::new();
    loop {
        match rdr.read_byte_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(csv_error(path, e)),
        }
        let line = record.position().map_or(0, |p| p.line());
        for (j, raw) in record.iter().enumerate() {
            let s = std::str::from_utf8(raw)
                .map_err(|_| CliError::ingest(path, Some(line), Some(&names[j]), "cell is not valid UTF-8"))?;
            cells[j].push(s.to_string());
        }
        lines.push(line);
    }
    if lines.is_empty() {
        return Err(CliError::ingest(path, None, None, "file has a header but no data rows"));
    }

    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut table = Table::new(stem);
    for (name, col) in names.iter().zip(cells) {
        let column = if categorical.contains(name) || !looks_numeric(&col[0]) {
            Column::Categorical(col)
        } else {
            let mut v = Vec::with_capacity(col.len());
            for (cell, &line) in col.iter().zip(&lines) {
                match cell.parse::<f64>() {
                    Ok(x) if x.is_finite() => v.push(x),
                    _ => {
                        return Err(CliError::ingest(
                            path,
                            Some(line),
                            Some(name),
                            format!("cannot parse `{cell}` as a finite number"),
                        ))
                    }
                }
            }
            Column::Numeric(v)
        };
        table.push(name.clone(), column)?;
    }
    log::debug!("read {} ({} rows, {} columns)", path.display(), table.nrows(), table.ncols());
    Ok(table)
}

fn looks_numeric(cell: &str) -> bool {
    cell.parse::<f64>().is_ok_and(f64::is_finite)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map(|p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("row has {len} fields, expected {expected_len}")
        }
        csv::ErrorKind::Utf8 { .. } => "text is not valid UTF-8".to_string(),
        csv::ErrorKind::Io(io) => io.to_string(),
        _ => e.to_string(),
    };
    CliError::ingest(path, line, None, message)
}

/// Expand directories to their `*.csv` files (sorted by name) and drop the
/// target file if it sits among them.
pub fn source_paths(inputs: &[PathBuf], target: &Path) -> Result<Vec<PathBuf>> {
    let target_canon = target.canonicalize().map_err(|e| CliError::io(target, e))?;
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| CliError::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(input.clone());
        }
    }
    let mut kept = Vec::new();
    for p in out {
        let canon = p.canonicalize().map_err(|e| CliError::io(&p, e))?;
        if canon != target_canon {
            kept.push(p);
        }
    }
    if kept.is_empty() {
        return Err(CliError::config("no source CSV files found in the data inputs"));
    }
    Ok(kept)
}

/// Read sources and target and check their schemas.
pub fn ingest(sources: &[PathBuf], target: &Path, data: &DataConfig) -> Result<DatasetCollection> {
    let tables: Vec<Table> = sources
        .iter()
        .map(|p| read_table(p, &data.categorical))
        .collect::<Result<_>>()?;
    let target_table = read_table(target, &data.categorical)?;
    let mut seen = BTreeSet::new();
    for t in &tables {
        if !seen.insert(t.name.clone()) || t.name == target_table.name {
            return Err(CliError::config(format!("two input files share the dataset name `{}`", t.name)));
        }
    }
    let outcome = match &data.outcome {
        Some(y) => Some(y.clone()),
        None => detect_outcome(&tables, &target_table)?,
    };
    let collection = DatasetCollection::new(tables, target_table, outcome)?;
    log::info!(
        "ingested {} sources (rows {:?}) and target `{}` ({} rows)",
        collection.k(),
        collection.source_sizes(),
        collection.target.name,
        collection.target.nrows()
    );
    Ok(collection)
}

/// The single column present in every source and absent from the target.
fn detect_outcome(sources: &[Table], target: &Table) -> Result<Option<String>> {
    let mut common: BTreeSet<String> = sources[0].column_names().map(str::to_string).collect();
    for s in &sources[1..] {
        let cols: BTreeSet<String> = s.column_names().map(str::to_string).collect();
        common = common.intersection(&cols).cloned().collect();
    }
    let extra: Vec<String> = common.into_iter().filter(|c| target.column(c).is_none()).collect();
    match extra.len() {
        0 => Ok(None),
        1 => Ok(Some(extra[0].clone())),
        _ => Err(CliError::config(format!(
            "several columns are missing from the target ({}); name the outcome under data.outcome",
            extra.join(", ")
        ))),
    }
}
