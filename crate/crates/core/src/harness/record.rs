//! Per-step run records and the line-delimited log format.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{AtdError, Result};
use crate::policy::CandidateScores;

pub const RUNLOG_SCHEMA: &str = "atd-runlog-v1";

/// One executed query step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub query: usize,
    pub outcome: f64,
    /// Mixing weight at selection time; absent for baselines without one.
    pub alpha: Option<f64>,
    /// Score breakdown of the chosen candidate; absent for random search.
    pub scores: Option<CandidateScores>,
    /// Cumulative success so far (sum of outcomes).
    pub cumulative: f64,
    /// Whether the transient memory retrained before this step.
    pub h_updated: bool,
    /// Wall-clock time of the step. Volatile: excluded from canonical
    /// serialization so identical (config, seed) runs compare byte-equal.
    pub wall_ms: f64,
}

impl RunRecord {
    /// Deterministic serialization (timing zeroed).
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.wall_ms = 0.0;
        serde_json::to_string(&copy).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogHeader {
    pub schema: String,
    pub method: String,
    pub budget: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LogLine {
    Step(RunRecord),
    Poisoned { step: usize, reason: String },
}

/// Writes header plus one line per record; a poison marker closes aborted
/// runs.
pub fn write_run_log(
    path: &Path,
    header: &RunLogHeader,
    records: &[RunRecord],
    poisoned: Option<(usize, &str)>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, &LogLine::Step(r.clone()))?;
        out.write_all(b"\n")?;
    }
    if let Some((step, reason)) = poisoned {
        serde_json::to_writer(
            &mut out,
            &LogLine::Poisoned {
                step,
                reason: reason.to_string(),
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Replays a log file.
pub fn read_run_log(path: &Path) -> Result<(RunLogHeader, Vec<RunRecord>, bool)> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or(AtdError::Empty("run log"))?
        .map_err(AtdError::Io)?;
    let header: RunLogHeader = serde_json::from_str(&header_line)?;
    if header.schema != RUNLOG_SCHEMA {
        return Err(AtdError::Config(format!(
            "unsupported run log schema {:?}",
            header.schema
        )));
    }
    let mut records = Vec::new();
    let mut poisoned = false;
    for line in lines {
        let line = line.map_err(AtdError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogLine>(&line)? {
            LogLine::Step(r) => records.push(r),
            LogLine::Poisoned { .. } => poisoned = true,
        }
    }
    Ok((header, records, poisoned))
}
