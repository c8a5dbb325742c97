//! Append-only NDJSON run logs.
//!
//! Each record goes to `<name>.ndjson` and is flushed immediately. Wall-clock
//! times are kept out of the main log (it must be byte-reproducible) and go
//! to `<name>.timing.ndjson`, one line per record with the same `seq`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::error::{LabError, Result};

pub struct RunLog {
    path: PathBuf,
    log: File,
    timing: File,
    seq: u64,
    start: Instant,
}

pub fn timing_path(log: &Path) -> PathBuf {
    log.with_extension("timing.ndjson")
}

fn open(path: &Path, append: bool) -> Result<File> {
    let mut o = OpenOptions::new();
    o.create(true);
    if append {
        o.append(true);
    } else {
        o.write(true).truncate(true);
    }
    o.open(path).map_err(|e| LabError::io(format!("opening {}", path.display()), e))
}

/// Reads the parseable records of a log, returning them with the number of
/// malformed lines that were skipped.
pub fn read_records(path: &Path) -> Result<(Vec<Value>, usize)> {
    let f = File::open(path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(v) if v.is_object() => records.push(v),
            _ => skipped += 1,
        }
    }
    Ok((records, skipped))
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { path: path.to_path_buf(), log: open(path, false)?, timing: open(&timing_path(path), false)?, seq: 0, start: Instant::now() })
    }

    /// Reopens a log for a resumed run. Records for which `keep` is false
    /// (steps past the checkpoint being resumed) are dropped first, so the
    /// finished log matches an uninterrupted run.
    pub fn resume(path: &Path, keep: impl Fn(&Value) -> bool) -> Result<Self> {
        let kept: Vec<String> = match fs::read_to_string(path) {
            Ok(text) => text.lines().filter(|l| serde_json::from_str::<Value>(l).map(|v| keep(&v)).unwrap_or(false)).map(str::to_owned).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(LabError::io(format!("reading {}", path.display()), e)),
        };
        let mut body = kept.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| LabError::io(format!("rewriting {}", path.display()), e))?;
        let seq = kept.len() as u64;
        Ok(Self { path: path.to_path_buf(), log: open(path, true)?, timing: open(&timing_path(path), true)?, seq, start: Instant::now() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let mut line = serde_json::to_vec(rec).expect("log record serializes");
        line.push(b'\n');
        let ctx = || format!("writing {}", self.path.display());
        self.log.write_all(&line).and_then(|_| self.log.flush()).map_err(|e| LabError::io(ctx(), e))?;
        let t = serde_json::json!({ "seq": self.seq, "elapsed_s": self.start.elapsed().as_secs_f64() });
        writeln!(self.timing, "{t}").map_err(|e| LabError::io(ctx(), e))?;
        self.seq += 1;
        Ok(())
    }
}
