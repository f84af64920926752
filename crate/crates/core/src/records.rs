//! Append-only JSON-lines round records and their schema.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluated communication round. Serialized as one JSON object per line;
/// the key set is identical for every record in a run (`mean_gen_loss` is
/// `null` for algorithms without a generator).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    /// Test-size-weighted mean of per-client accuracy.
    pub amp: f64,
    /// Population variance of per-client accuracies.
    pub fm: f64,
    /// Minimum per-client accuracy.
    pub wlp: f64,
    pub per_client_acc: Vec<f64>,
    pub mean_student_loss: f64,
    pub mean_gen_loss: Option<f64>,
    pub wall_seconds: f64,
}

impl RoundRecord {
    pub fn validate(&self) -> Result<()> {
        if self.round == 0 {
            return Err(Error::data("round indices are 1-based"));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.amp) || !in_unit(self.wlp) || !(self.fm >= 0.0) {
            return Err(Error::data(format!(
                "metrics out of range in round {}: amp={} fm={} wlp={}",
                self.round, self.amp, self.fm, self.wlp
            )));
        }
        if self.per_client_acc.iter().any(|a| !in_unit(*a)) {
            return Err(Error::data(format!(
                "per-client accuracy out of range in round {}",
                self.round
            )));
        }
        Ok(())
    }
}

/// Append one record as a JSON line.
pub fn append_record(path: &Path, rec: &RoundRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(rec)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Read a full records file, checking schema and strictly increasing rounds.
pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut last_round = 0u64;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RoundRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: bad record: {e}", path.display(), i + 1)))?;
        rec.validate()?;
        if rec.round <= last_round {
            return Err(Error::data(format!(
                "{}: rounds not strictly increasing at line {}",
                path.display(),
                i + 1
            )));
        }
        last_round = rec.round;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: u64) -> RoundRecord {
        RoundRecord {
            round,
            amp: 0.7,
            fm: 0.0066666666,
            wlp: 0.6,
            per_client_acc: vec![0.6, 0.7, 0.8],
            mean_student_loss: 1.3,
            mean_gen_loss: None,
            wall_seconds: 0.01,
        }
    }

    #[test]
    fn roundtrip_preserves_records_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let mut a = rec(1);
        a.mean_gen_loss = Some(2.5);
        let b = rec(2);
        append_record(&path, &a).unwrap();
        append_record(&path, &b).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn key_set_is_stable_across_gen_and_non_gen() {
        let with = serde_json::to_value(rec(1)).unwrap();
        let mut r = rec(1);
        r.mean_gen_loss = Some(1.0);
        let without = serde_json::to_value(r).unwrap();
        let keys = |v: &serde_json::Value| {
            let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
            k.sort();
            k
        };
        assert_eq!(keys(&with), keys(&without));
    }

    #[test]
    fn non_monotone_rounds_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        append_record(&path, &rec(2)).unwrap();
        append_record(&path, &rec(2)).unwrap();
        assert!(read_records(&path).is_err());
    }

    #[test]
    fn out_of_range_metrics_are_rejected() {
        let mut r = rec(1);
        r.amp = 1.5;
        assert!(r.validate().is_err());
        let mut r = rec(1);
        r.fm = -0.1;
        assert!(r.validate().is_err());
        let mut r = rec(1);
        r.round = 0;
        assert!(r.validate().is_err());
    }
}
