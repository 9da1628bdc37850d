//! Metric CSV log.
//!
//! Fixed column set; values are written with Rust's shortest round-trip
//! float formatting, so identical runs produce byte-identical files.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const METRIC_HEADER: &str =
    "step,G_Loss,G_ID,G_feat_match,D_fake,D_real,lambda_id,lambda_rec,lr";

/// One logged row. `G_ID` and `G_feat_match` carry the weighted loss terms
/// (`lambda * loss`), `G_Loss` the generator's adversarial term, `D_fake` /
/// `D_real` the two discriminator hinge terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub g_loss: f64,
    pub g_id: f64,
    pub g_feat_match: f64,
    pub d_fake: f64,
    pub d_real: f64,
    pub lambda_id: f64,
    pub lambda_rec: f64,
    pub lr: f64,
}

impl MetricRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.g_loss,
            self.g_id,
            self.g_feat_match,
            self.d_fake,
            self.d_real,
            self.lambda_id,
            self.lambda_rec,
            self.lr
        )
    }

    pub fn parse(line: &str, line_no: usize) -> Result<MetricRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Config {
                line: line_no,
                what: format!("expected 9 metric fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| Error::Config {
                line: line_no,
                what: format!("bad number `{}`", fields[i]),
            })
        };
        Ok(MetricRow {
            step: fields[0].parse().map_err(|_| Error::Config {
                line: line_no,
                what: format!("bad step `{}`", fields[0]),
            })?,
            g_loss: num(1)?,
            g_id: num(2)?,
            g_feat_match: num(3)?,
            d_fake: num(4)?,
            d_real: num(5)?,
            lambda_id: num(6)?,
            lambda_rec: num(7)?,
            lr: num(8)?,
        })
    }
}

/// Streaming writer that emits the header on creation.
pub struct MetricWriter {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl MetricWriter {
    pub fn create(path: &Path) -> Result<MetricWriter> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(METRIC_HEADER.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        self.file
            .write_all(row.to_line().as_bytes())
            .and_then(|_| self.file.write_all(b"\n"))
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a whole metric log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRIC_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Config {
                line: 1,
                what: format!("unexpected header `{header}`"),
            })
        }
        None => return Err(Error::EmptyInput { op: "metric log" }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        rows.push(MetricRow::parse(line, i + 1)?);
    }
    Ok(rows)
}
