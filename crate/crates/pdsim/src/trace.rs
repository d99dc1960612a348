//! Line-delimited JSON trace files.
//!
//! Each line is one record, e.g. `{"prompt_len": 3000, "output_len": 120}`.
//! Arrival streams use the same layout with an extra `arrival_time_ms`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use pdsim_core::{Arrival, TraceRecord};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: prompt_len and output_len must both be at least 1")]
    Invalid { line: usize },
    #[error("trace contains no records")]
    Empty,
}

pub fn parse_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord =
            serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: n + 1, source })?;
        if !record.is_valid() {
            return Err(TraceError::Invalid { line: n + 1 });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(records)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    parse_trace(BufReader::new(File::open(path)?))
}

pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_trace(path: &Path, records: &[TraceRecord]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_trace(&mut out, records)?;
    out.flush()
}

pub fn write_arrivals<W: Write>(mut out: W, arrivals: &[Arrival]) -> io::Result<()> {
    for a in arrivals {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
