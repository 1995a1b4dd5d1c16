//! Result files: a JSON summary per run and per-epoch metrics CSV.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use super::train::EpochMetrics;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub task: String,
    pub mode: String,
    pub acc: f64,
    pub bacc: f64,
    pub f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub seed: u64,
    pub ckpt: String,
}

impl Results {
    pub fn new(task: &str, mode: &str, report: &MetricReport, seed: u64, ckpt: &str) -> Self {
        Self {
            task: task.to_string(),
            mode: mode.to_string(),
            acc: report.accuracy,
            bacc: report.balanced_accuracy,
            f1: report.f1,
            confusion: report.confusion.clone(),
            seed,
            ckpt: ckpt.to_string(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_epoch_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        w.write_record(["epoch", "train_loss", "lr", "val_acc", "val_bacc", "val_f1"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::compute_metrics;

    #[test]
    fn results_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = compute_metrics(&[0, 1, 1], &[0, 1, 0], 2, 1).unwrap();
        let r = Results::new("bright", "finetune", &m, 7, "model.nvk");
        let path = dir.path().join("results.json");
        r.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        for key in [
            "task",
            "mode",
            "acc",
            "bacc",
            "f1",
            "confusion",
            "seed",
            "ckpt",
        ] {
            assert!(text.contains(&format!("\"{key}\"")));
        }
        assert_eq!(Results::read(&path).unwrap(), r);
    }

    #[test]
    fn empty_history_still_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_epoch_metrics(&path, &[]).unwrap();
        assert!(fs::read_to_string(&path)
            .unwrap()
            .starts_with("epoch,train_loss"));
    }
}
