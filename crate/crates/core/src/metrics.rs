//! Per-epoch training metrics, emitted as CSV rows.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub const CSV_HEADER: &str = "run_id,phase,epoch,train_loss,val_loss,val_acc,sparsity,wall_clock_s";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub sparsity: f64,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.run_id,
            self.phase,
            self.epoch,
            self.train_loss,
            self.val_loss,
            self.val_acc,
            self.sparsity,
            self.wall_clock_s
        )
    }
}

/// Append-only CSV writer. The header row is written when the file is
/// created and never repeated.
pub struct MetricsSink {
    file: File,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh || file.metadata()?.len() == 0 {
            writeln!(file, "{CSV_HEADER}")?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn header_written_once_across_reopens() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let row = MetricsRow {
            run_id: "r".into(),
            phase: "train".into(),
            epoch: 0,
            train_loss: 1.0,
            val_loss: 2.0,
            val_acc: 0.5,
            sparsity: 0.0,
            wall_clock_s: 0.1,
        };
        {
            let mut sink = MetricsSink::create(&path).unwrap();
            sink.append(&row).unwrap();
        }
        {
            let mut sink = MetricsSink::create(&path).unwrap();
            sink.append(&row).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], lines[2]);
    }
}
