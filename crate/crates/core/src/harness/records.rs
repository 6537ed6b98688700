//! Append-only experiment records as JSON lines.
//!
//! One writer owns a file; rows are independently parseable so a crash can
//! lose at most the final, partially written line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Grid,
    Probe,
    Finetune,
    Metric,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub config_hash: String,
    pub phase: Phase,
    pub key: String,
    pub step: u64,
    pub value: f64,
    pub wall_time: f64,
}

/// Destination for emitted records.
pub trait RecordSink {
    fn emit(&mut self, phase: Phase, key: &str, step: u64, value: f64) -> Result<()>;
}

/// Collects records in memory; useful in tests and for summaries.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<ExperimentRecord>,
}

impl RecordSink for MemorySink {
    fn emit(&mut self, phase: Phase, key: &str, step: u64, value: f64) -> Result<()> {
        self.records.push(ExperimentRecord {
            run_id: String::new(),
            config_hash: String::new(),
            phase,
            key: key.to_string(),
            step,
            value,
            wall_time: 0.0,
        });
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl RecordSink for NullSink {
    fn emit(&mut self, _: Phase, _: &str, _: u64, _: f64) -> Result<()> {
        Ok(())
    }
}

/// Line-buffered JSONL writer; every emit flushes one complete line.
#[derive(Debug)]
pub struct RecordWriter {
    run_id: String,
    config_hash: String,
    out: BufWriter<File>,
    started: Instant,
}

impl RecordWriter {
    pub fn create(path: impl AsRef<Path>, run_id: &str, config_hash: &str) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(e, path))?;
        Ok(RecordWriter {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            out: BufWriter::new(file),
            started: Instant::now(),
        })
    }
}

impl RecordSink for RecordWriter {
    fn emit(&mut self, phase: Phase, key: &str, step: u64, value: f64) -> Result<()> {
        let rec = ExperimentRecord {
            run_id: self.run_id.clone(),
            config_hash: self.config_hash.clone(),
            phase,
            key: key.to_string(),
            step,
            value,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&rec)?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a record file, skipping a truncated final line. Returns the rows and
/// the number of skipped lines (0 or 1 for a clean crash; malformed interior
/// lines are errors).
pub fn read_records(path: impl AsRef<Path>) -> Result<(Vec<ExperimentRecord>, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(e, path))?;
    let reader = BufReader::new(file);
    let lines: Vec<String> = reader
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(e, path))?;
    let mut out = Vec::with_capacity(lines.len());
    let mut skipped = 0usize;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ExperimentRecord>(line) {
            Ok(rec) => out.push(rec),
            Err(e) if i + 1 == lines.len() => {
                eprintln!("warning: skipping truncated final record line: {e}");
                skipped += 1;
            }
            Err(e) => {
                return Err(Error::data(format!(
                    "malformed record at line {}: {e}",
                    i + 1
                )))
            }
        }
    }
    Ok((out, skipped))
}

/// Equality of two record streams ignoring wall-clock fields, the form of
/// determinism fixed-seed reruns guarantee.
pub fn records_equal_modulo_walltime(a: &[ExperimentRecord], b: &[ExperimentRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.run_id == y.run_id
                && x.config_hash == y.config_hash
                && x.phase == y.phase
                && x.key == y.key
                && x.step == y.step
                && x.value.to_bits() == y.value.to_bits()
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        {
            let mut w = RecordWriter::create(&path, "run1", "hash1").unwrap();
            w.emit(Phase::Pretrain, "loss_eps", 1, 0.5).unwrap();
            w.emit(Phase::Probe, "linear_acc", 2, 0.91).unwrap();
        }
        let (recs, skipped) = read_records(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(skipped, 0);
        assert_eq!(recs[0].key, "loss_eps");
        assert_eq!(recs[1].value, 0.91);
        assert_eq!(recs[0].run_id, "run1");
    }

    #[test]
    fn truncated_final_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        {
            let mut w = RecordWriter::create(&path, "r", "h").unwrap();
            w.emit(Phase::Pretrain, "loss_eps", 1, 0.5).unwrap();
            w.emit(Phase::Pretrain, "loss_eps", 2, 0.4).unwrap();
        }
        // simulate a crash mid-line
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, bytes).unwrap();
        let (recs, skipped) = read_records(&path).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(skipped, 1);
        assert_eq!(recs[0].step, 1);
    }

    #[test]
    fn malformed_interior_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        std::fs::write(&path, "not json\n{\"also\": \"bad\"}\n").unwrap();
        assert!(read_records(&path).is_err());
    }

    #[test]
    fn walltime_masked_comparison() {
        let mk = |wall| ExperimentRecord {
            run_id: "r".into(),
            config_hash: "h".into(),
            phase: Phase::Metric,
            key: "k".into(),
            step: 3,
            value: 1.25,
            wall_time: wall,
        };
        assert!(records_equal_modulo_walltime(&[mk(0.1)], &[mk(9.9)]));
        let mut other = mk(0.1);
        other.value = 1.26;
        assert!(!records_equal_modulo_walltime(&[mk(0.1)], &[other]));
    }
}
