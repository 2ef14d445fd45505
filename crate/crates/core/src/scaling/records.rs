use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_forward_flops, count_params, format_notation, ModelConfig};

/// Training compute `flops_fwd * 3 * N * T`, exact in 128-bit arithmetic.
pub fn compute_cost(flops_fwd: u64, examples: u64, epochs: u64) -> Result<u128> {
    if flops_fwd == 0 || examples == 0 || epochs == 0 {
        return Err(Error::invalid(format!(
            "compute cost needs positive inputs, got flops={flops_fwd} N={examples} T={epochs}"
        )));
    }
    (flops_fwd as u128 * 3)
        .checked_mul(examples as u128)
        .and_then(|v| v.checked_mul(epochs as u128))
        .ok_or_else(|| Error::invalid("compute cost exceeds 128 bits"))
}

/// Which error a frontier or fit is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorField {
    Upstream,
    Probe,
    Finetune,
}

impl std::str::FromStr for ErrorField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upstream" => Ok(Self::Upstream),
            "probe" => Ok(Self::Probe),
            "finetune" => Ok(Self::Finetune),
            _ => Err(Error::invalid(format!(
                "unknown error field {s:?}; expected upstream, probe or finetune"
            ))),
        }
    }
}

/// One trained model evaluated at one epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub depth: usize,
    pub width: usize,
    pub expansion: usize,
    pub params: u64,
    pub flops_fwd: u64,
    pub dataset_size: u64,
    pub epochs: u64,
    pub batch: usize,
    pub compute_flops: u128,
    pub upstream_err: Option<f64>,
    pub probe_err: Option<f64>,
    pub finetune_err: Option<f64>,
}

impl RunRecord {
    /// Fills in the accounting columns from the model config; errors start empty.
    pub fn new(run_id: impl Into<String>, model: &ModelConfig, dataset_size: u64, epochs: u64, batch: usize) -> Result<Self> {
        let flops_fwd = count_forward_flops(model);
        Ok(Self {
            run_id: run_id.into(),
            depth: model.depth,
            width: model.width,
            expansion: model.expansion,
            params: count_params(model),
            flops_fwd,
            dataset_size,
            epochs,
            batch,
            compute_flops: compute_cost(flops_fwd, dataset_size, epochs)?,
            upstream_err: None,
            probe_err: None,
            finetune_err: None,
        })
    }

    pub fn notation(&self) -> String {
        format_notation(self.depth, self.width)
    }

    pub fn error(&self, field: ErrorField) -> Option<f64> {
        match field {
            ErrorField::Upstream => self.upstream_err,
            ErrorField::Probe => self.probe_err,
            ErrorField::Finetune => self.finetune_err,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = compute_cost(self.flops_fwd, self.dataset_size, self.epochs)?;
        if c != self.compute_flops {
            return Err(Error::invalid(format!(
                "run {}: compute_flops {} differs from flops_fwd*3*N*T = {c}",
                self.run_id, self.compute_flops
            )));
        }
        for e in [self.upstream_err, self.probe_err, self.finetune_err].into_iter().flatten() {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invalid(format!("run {}: error {e} outside [0, 1]", self.run_id)));
            }
        }
        Ok(())
    }
}

pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let rec: RunRecord = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_runs_csv(path: impl AsRef<Path>, runs: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in runs {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends to an existing runs file, writing the header only when the file is new or empty.
pub fn append_runs_csv(path: impl AsRef<Path>, runs: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in runs {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs trained for exactly `epochs` epochs.
pub fn filter_epochs(runs: &[RunRecord], epochs: u64) -> Vec<RunRecord> {
    runs.iter().filter(|r| r.epochs == epochs).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InputShape;

    #[test]
    fn cost_examples() {
        assert_eq!(compute_cost(1, 1, 1).unwrap(), 3);
        let c = compute_cost(73_615_360, 12_000_000, 400).unwrap();
        assert_eq!(c, 1_060_061_184_000_000_000);
        assert_eq!(compute_cost(7, 10, 3).unwrap() * 2, compute_cost(7, 20, 3).unwrap());
        assert!(compute_cost(0, 1, 1).is_err());
        assert_eq!(
            compute_cost(u64::MAX, u32::MAX as u64, 1).unwrap(),
            3 * (u64::MAX as u128) * (u32::MAX as u128)
        );
        assert!(compute_cost(u64::MAX, u64::MAX, u64::MAX).is_err());
    }

    #[test]
    fn csv_header_and_roundtrip() {
        let model = ModelConfig::bottleneck(2, 16, InputShape::new(4, 4, 3), 10);
        let mut rec = RunRecord::new("abc", &model, 100, 2, 32).unwrap();
        rec.upstream_err = Some(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        append_runs_csv(&path, &[rec.clone()]).unwrap();
        append_runs_csv(&path, &[rec.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "run_id,depth,width,expansion,params,flops_fwd,dataset_size,epochs,batch,compute_flops,upstream_err,probe_err,finetune_err\n"
        ));
        assert_eq!(read_runs_csv(&path).unwrap(), vec![rec.clone(), rec]);
    }

    #[test]
    fn inconsistent_compute_rejected() {
        let model = ModelConfig::bottleneck(1, 8, InputShape::new(2, 2, 3), 2);
        let mut rec = RunRecord::new("x", &model, 10, 1, 4).unwrap();
        rec.compute_flops += 1;
        assert!(rec.validate().is_err());
    }
}
