//! Append-only line-delimited trial log with resume support.
//!
//! The first line is a header record carrying the search-space hash; each
//! following line is one trial. A partial final line (interrupted write) is
//! dropped with a warning; a malformed complete line is a hard error.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tpe::Assignment;
use super::SearchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// 1 = combination search, 2 = hyperparameter search.
    pub step: u8,
    pub params: Assignment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    pub status: TrialStatus,
    pub seed: u64,
}

impl TrialRecord {
    fn validate(&self, line: usize) -> Result<(), SearchError> {
        let consistent = match self.status {
            TrialStatus::Ok => self.objective.is_some(),
            TrialStatus::Failed => self.objective.is_none(),
        };
        if !consistent {
            return Err(SearchError::Log {
                line,
                msg: "objective must be present exactly when status is ok".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    space_hash: String,
}

#[derive(Clone, Debug, Default)]
pub struct TrialLog {
    pub space_hash: String,
    pub records: Vec<TrialRecord>,
}

/// Loads a trial log. A missing file is a fresh run (`None`).
pub fn load_trials(path: &Path) -> Result<Option<TrialLog>, SearchError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(SearchError::Io(e)),
    };
    let complete_trailer = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    if lines.is_empty() {
        return Ok(None);
    }
    let header: Header = serde_json::from_str(lines[0]).map_err(|e| SearchError::Log {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        let is_last = i + 1 == lines.len();
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(r) => {
                r.validate(i + 1)?;
                records.push(r);
            }
            Err(e) if is_last && !complete_trailer => {
                eprintln!(
                    "warning: dropping partial final trial-log line {} ({e})",
                    i + 1
                );
            }
            Err(e) => {
                return Err(SearchError::Log {
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(Some(TrialLog {
        space_hash: header.space_hash,
        records,
    }))
}

/// Creates the log file with its header line.
pub fn create_log(path: &Path, space_hash: &str) -> Result<(), SearchError> {
    let mut f = std::fs::File::create(path)?;
    let header = Header {
        space_hash: space_hash.to_string(),
    };
    writeln!(f, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    Ok(())
}

/// Appends one trial and flushes so interrupted runs lose at most one line.
pub fn append_trial(path: &Path, record: &TrialRecord) -> Result<(), SearchError> {
    let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record).expect("record serializes"))?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::tpe::ParamValue;

    fn sample_record(i: usize, ok: bool) -> TrialRecord {
        let mut params = Assignment::new();
        params.insert("d".into(), ParamValue::Bool(i % 2 == 0));
        params.insert("lr".into(), ParamValue::Float(1e-3));
        TrialRecord {
            trial: i,
            step: 1,
            params,
            objective: ok.then_some(0.5 + i as f64),
            status: if ok { TrialStatus::Ok } else { TrialStatus::Failed },
            seed: 7,
        }
    }

    #[test]
    fn write_three_load_three_field_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.jsonl");
        create_log(&path, "abc123").unwrap();
        let records: Vec<TrialRecord> =
            (0..3).map(|i| sample_record(i, i != 1)).collect();
        for r in &records {
            append_trial(&path, r).unwrap();
        }
        let log = load_trials(&path).unwrap().unwrap();
        assert_eq!(log.space_hash, "abc123");
        assert_eq!(log.records, records);
    }

    #[test]
    fn partial_final_line_is_dropped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.jsonl");
        create_log(&path, "h").unwrap();
        for i in 0..3 {
            append_trial(&path, &sample_record(i, true)).unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 25);
        std::fs::write(&path, bytes).unwrap();
        let log = load_trials(&path).unwrap().unwrap();
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn malformed_complete_line_is_a_hard_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.jsonl");
        create_log(&path, "h").unwrap();
        append_trial(&path, &sample_record(0, true)).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        text.push_str(&serde_json::to_string(&sample_record(1, true)).unwrap());
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        let err = load_trials(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn missing_file_is_a_fresh_run() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_trials(&dir.path().join("nope.jsonl")).unwrap().is_none());
    }

    #[test]
    fn status_objective_consistency_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.jsonl");
        create_log(&path, "h").unwrap();
        let mut bad = sample_record(0, true);
        bad.objective = None; // ok status without objective
        append_trial(&path, &bad).unwrap();
        assert!(load_trials(&path).is_err());
    }
}
