//! Per-epoch metrics CSV.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::MetricsRow;

pub const METRICS_COLUMNS: [&str; 12] = [
    "epoch",
    "split",
    "loss_total",
    "loss_m",
    "loss_m1",
    "loss_sd_ce",
    "loss_sd_kl",
    "acc_si",
    "acc_ag",
    "acc_sd",
    "lr",
    "seconds",
];

/// Appends rows to a CSV file, flushing after each one. The file starts with
/// `#`-prefixed comment lines followed by the column header.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(
        format!("writing {}", path.display()),
        std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
    )
}

impl MetricsWriter {
    /// Creates (truncating) `path` and writes the comment lines and header.
    pub fn create(path: impl AsRef<Path>, comments: &str) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        let mut file = File::create(&path).map_err(io)?;
        for line in comments.lines() {
            writeln!(file, "# {line}").map_err(io)?;
        }
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(METRICS_COLUMNS).map_err(|e| csv_err(&path, e))?;
        inner.flush().map_err(io)?;
        Ok(MetricsWriter { path, inner })
    }

    /// Reopens an existing file for appending without rewriting the header.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(MetricsWriter {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(file),
            path,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let l = &row.loss;
        let record = [
            row.epoch.to_string(),
            row.split.to_string(),
            l.total.to_string(),
            l.m.to_string(),
            l.m1.to_string(),
            opt(l.sd_ce),
            opt(l.sd_kl),
            opt(row.acc_si),
            opt(row.acc_ag),
            opt(row.acc_sd),
            row.lr.to_string(),
            format!("{:.6}", row.seconds),
        ];
        self.inner.write_record(&record).map_err(|e| csv_err(&self.path, e))?;
        self.inner
            .flush()
            .map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
