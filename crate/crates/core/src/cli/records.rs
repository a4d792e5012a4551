use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluate::ValueEstimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    /// Policy label, e.g. `d1` or `d3*`.
    pub policy: String,
    pub estimate: ValueEstimate,
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub replicate: Option<usize>,
    pub scenario: Option<String>,
    pub n: Option<usize>,
    pub learner: Option<String>,
    pub values: Vec<NamedValue>,
    /// Selected tuning parameters: learner reports and bridge choices.
    pub tuning: Option<serde_json::Value>,
    pub wall_clock_seconds: f64,
    pub error: Option<String>,
    /// Exit status the error maps to.
    pub error_code: Option<i32>,
}

impl ResultRecord {
    pub fn new(command: &str, config_hash: &str, seed: u64, replicate: Option<usize>) -> Self {
        let mut h = Sha256::new();
        h.update(config_hash.as_bytes());
        h.update(command.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(replicate.map_or(u64::MAX, |r| r as u64).to_le_bytes());
        Self {
            run_id: hex::encode(&h.finalize()[..8]),
            command: command.into(),
            config_hash: config_hash.into(),
            seed,
            replicate,
            scenario: None,
            n: None,
            learner: None,
            values: Vec::new(),
            tuning: None,
            wall_clock_seconds: 0.0,
            error: None,
            error_code: None,
        }
    }

    /// The record with the timing zeroed; everything else is a function of
    /// the configuration and seed.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_seconds: 0.0, ..self.clone() }
    }

    pub fn fail(&mut self, e: &Error) {
        self.error = Some(e.to_string());
        self.error_code = Some(e.exit_code());
    }

    pub fn value(&self, policy: &str) -> Option<&ValueEstimate> {
        self.values.iter().find(|v| v.policy == policy).map(|v| &v.estimate)
    }
}

pub fn append_records(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{influence_estimate, Estimator};

    #[test]
    fn records_round_trip_exactly() {
        let mut r = ResultRecord::new("fit", "abc", 7, Some(3));
        r.values.push(NamedValue {
            policy: "d3dr".into(),
            estimate: influence_estimate(&[0.1, 1.0 / 3.0, 2.0f64.sqrt()], Estimator::DoublyRobust),
        });
        r.tuning = Some(serde_json::json!({"rho": 1e-7}));
        r.wall_clock_seconds = 0.123;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        append_records(&path, &[r.clone(), r.without_timing()]).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back, vec![r.clone(), r.without_timing()]);
        assert_eq!(r.run_id.len(), 16);
        assert_ne!(r.run_id, ResultRecord::new("fit", "abc", 7, Some(4)).run_id);
    }
}
