//! Per-step metrics and the `metrics.csv` log.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,loss_fm,loss_proj,loss_struc,loss_total,grad_norm,wallclock_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_fm: f32,
    pub loss_proj: f32,
    pub loss_struc: f32,
    pub loss_total: f32,
    pub grad_norm: f32,
    pub wallclock_ms: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.loss_fm,
            self.loss_proj,
            self.loss_struc,
            self.loss_total,
            self.grad_norm,
            self.wallclock_ms
        )
    }

    pub fn parse(line: &str) -> Result<MetricsRow> {
        let bad = || Error::InvalidArgument(format!("malformed metrics row '{line}'"));
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let float = |s: &str| s.parse::<f32>().map_err(|_| bad());
        Ok(MetricsRow {
            step: f[0].parse().map_err(|_| bad())?,
            loss_fm: float(f[1])?,
            loss_proj: float(f[2])?,
            loss_struc: float(f[3])?,
            loss_total: float(f[4])?,
            grad_norm: float(f[5])?,
            wallclock_ms: f[6].parse().map_err(|_| bad())?,
        })
    }
}

/// Reads every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .unwrap_or_default();
    if header != METRICS_HEADER {
        return Err(Error::InvalidArgument(format!(
            "{} does not start with the metrics header",
            path.display()
        )));
    }
    lines
        .map(|l| MetricsRow::parse(&l.map_err(|e| Error::io(path, e))?))
        .collect()
}

/// Appends rows to `metrics.csv`, flushing after each one so a failed run
/// leaves a complete prefix behind.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Keeps rows with `step <= keep_through` from an existing file (or
    /// starts a new one) and positions for appending.
    pub fn resume(path: &Path, keep_through: u64) -> Result<MetricsWriter> {
        let kept: Vec<MetricsRow> = if path.exists() {
            read_metrics(path)?
                .into_iter()
                .filter(|r| r.step <= keep_through)
                .collect()
        } else {
            Vec::new()
        };
        let mut w = MetricsWriter::create(path)?;
        for row in &kept {
            w.append(row)?;
        }
        Ok(w)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            loss_fm: 1.25,
            loss_proj: 0.1 + step as f32,
            loss_struc: 3e-7,
            loss_total: 2.5,
            grad_norm: 0.333_333_34,
            wallclock_ms: 0,
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let r = row(3);
        assert_eq!(MetricsRow::parse(&r.to_csv()).unwrap(), r);
        assert!(MetricsRow::parse("1,2,3").is_err());
    }

    #[test]
    fn resume_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        for s in 1..=5 {
            w.append(&row(s)).unwrap();
        }
        drop(w);
        let mut w = MetricsWriter::resume(&path, 3).unwrap();
        w.append(&row(4)).unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }
}
