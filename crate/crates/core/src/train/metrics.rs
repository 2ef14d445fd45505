use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of the per-epoch metrics log. `test_err` is empty for epochs that
/// were not evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub seconds: f64,
    pub cum_flops: u128,
}

impl MetricsRecord {
    /// The record with wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Appends records to a CSV file, writing the header only for a new or empty file.
pub fn append_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_with_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let a = MetricsRecord {
            epoch: 1,
            train_loss: 2.5,
            train_err: 0.75,
            test_err: None,
            seconds: 1.5,
            cum_flops: 123_456_789_012_345_678_901,
        };
        let b = MetricsRecord {
            epoch: 2,
            test_err: Some(0.5),
            ..a.clone()
        };
        append_metrics_csv(&path, std::slice::from_ref(&a)).unwrap();
        append_metrics_csv(&path, std::slice::from_ref(&b)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,train_err,test_err,seconds,cum_flops\n"));
        assert_eq!(text.matches("epoch").count(), 1);
        assert_eq!(read_metrics_csv(&path).unwrap(), vec![a, b]);
    }
}
