//! Capture-log files: a header line, then one tab-separated record per line
//! `station_id  unix_ts  rpi_hex  aem_hex  rssi`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::CaptureRecord;
use crate::crypto::{Aem, Rpi};

pub const CAPTURE_HEADER: &str = "#gap-lab-captures v1";

#[derive(Debug, Error)]
pub enum CaptureParseError {
    #[error("{path}line {line}: {message}")]
    Line { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn line_error(path: Option<&Path>, line: usize, message: impl Into<String>) -> CaptureParseError {
    CaptureParseError::Line {
        path: path.map(|p| format!("{}: ", p.display())).unwrap_or_default(),
        line,
        message: message.into(),
    }
}

pub fn write_captures<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a CaptureRecord>,
) -> io::Result<()> {
    writeln!(out, "{CAPTURE_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.station_id, r.timestamp, r.rpi, r.aem, r.rssi
        )?;
    }
    out.flush()
}

fn parse_captures<R: BufRead>(input: R, path: Option<&Path>) -> Result<Vec<CaptureRecord>, CaptureParseError> {
    let mut records = Vec::new();
    let mut saw_header = false;
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if !saw_header {
            if line.trim_end() != CAPTURE_HEADER {
                return Err(line_error(path, lineno, format!("expected header {CAPTURE_HEADER:?}")));
            }
            saw_header = true;
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(line_error(
                path,
                lineno,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let timestamp = fields[1]
            .parse::<i64>()
            .map_err(|e| line_error(path, lineno, format!("timestamp: {e}")))?;
        let rpi = Rpi::from_hex(fields[2]).map_err(|e| line_error(path, lineno, format!("rpi: {e}")))?;
        let aem = Aem::from_hex(fields[3]).map_err(|e| line_error(path, lineno, format!("aem: {e}")))?;
        let rssi = fields[4]
            .parse::<i32>()
            .map_err(|e| line_error(path, lineno, format!("rssi: {e}")))?;
        if fields[0].is_empty() {
            return Err(line_error(path, lineno, "empty station id"));
        }
        records.push(CaptureRecord {
            station_id: fields[0].to_string(),
            timestamp,
            rpi,
            aem,
            rssi,
        });
    }
    if !saw_header {
        return Err(line_error(path, 1, "empty file, header missing"));
    }
    Ok(records)
}

pub fn read_captures<R: BufRead>(input: R) -> Result<Vec<CaptureRecord>, CaptureParseError> {
    parse_captures(input, None)
}

pub fn export_captures(records: &[CaptureRecord], path: &Path) -> io::Result<()> {
    let file = fs::File::create(path)?;
    write_captures(BufWriter::new(file), records)
}

pub fn import_captures(path: &Path) -> Result<Vec<CaptureRecord>, CaptureParseError> {
    let file = fs::File::open(path)?;
    parse_captures(BufReader::new(file), Some(path))
}

/// Writes `captures-<station>.tsv` for every station log; returns the paths.
pub fn write_station_logs(logs: &BTreeMap<String, Vec<CaptureRecord>>, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    logs.iter()
        .map(|(station, records)| {
            let path = dir.join(format!("captures-{station}.tsv"));
            export_captures(records, &path)?;
            Ok(path)
        })
        .collect()
}

/// Reads a single capture file, or every `*.tsv` file in a directory (sorted
/// by name), concatenated.
pub fn read_capture_dir(path: &Path) -> Result<Vec<CaptureRecord>, CaptureParseError> {
    if path.is_file() {
        return import_captures(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(import_captures(&f)?);
    }
    Ok(all)
}
