//! Metrics rows, written to CSV and JSON Lines as they are produced.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use selfreeze_core::training::EvalResult;

use crate::error::{CliError, Result};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub strategy: String,
    pub stage: String,
    /// 1-based within training stages, 0 for evaluation-only rows.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub general_ppl: f64,
    pub general_acc: Option<f64>,
    pub domain_ppl: f64,
    pub domain_acc: Option<f64>,
    pub core_fraction: Option<f64>,
    pub wall_ms: Option<u64>,
    /// Parameter values plus optimizer moments held during the stage.
    pub peak_param_bytes: usize,
    pub importance_bytes: Option<usize>,
}

/// General and domain evaluation of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub general: EvalResult,
    pub domain: EvalResult,
}

/// Append-only writer for both metrics formats. Every row is flushed, so a
/// failed run leaves the rows written so far.
pub struct MetricsSink {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    rows: Vec<MetricsRecord>,
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| CliError::io(path, e))
}

impl MetricsSink {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(MetricsSink {
            csv: csv::Writer::from_writer(create(&dir.join(METRICS_CSV))?),
            jsonl: BufWriter::new(create(&dir.join(METRICS_JSONL))?),
            rows: Vec::new(),
        })
    }

    pub fn append(&mut self, row: MetricsRecord) -> Result<()> {
        self.csv.serialize(&row)?;
        self.csv.flush().map_err(|e| CliError::io(PathBuf::from(METRICS_CSV), e))?;
        serde_json::to_writer(&mut self.jsonl, &row)?;
        self.jsonl
            .write_all(b"\n")
            .and_then(|_| self.jsonl.flush())
            .map_err(|e| CliError::io(PathBuf::from(METRICS_JSONL), e))?;
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRecord] {
        &self.rows
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(CliError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, acc: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            strategy: "selective".into(),
            stage: "domain".into(),
            epoch,
            train_loss: Some(1.25),
            general_ppl: 3.5,
            general_acc: acc,
            domain_ppl: 4.0,
            domain_acc: acc,
            core_fraction: None,
            wall_ms: None,
            peak_param_bytes: 800,
            importance_bytes: None,
        }
    }

    #[test]
    fn both_formats_get_every_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricsSink::create(dir.path()).unwrap();
        sink.append(row(1, Some(0.5))).unwrap();
        sink.append(row(2, None)).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("run_id,strategy,stage,epoch,"));
        assert!(lines[2].contains(",,"));
        let back = read_jsonl(&dir.path().join(METRICS_JSONL)).unwrap();
        assert_eq!(back, vec![row(1, Some(0.5)), row(2, None)]);
    }
}
