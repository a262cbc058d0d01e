//! CSV output. Every file starts with one `#` line carrying the crate
//! version, the master seed and the configuration hash.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::optimizer::StepRecord;

pub fn header_line(seed: u64, config_hash: &str) -> String {
    format!("# sdze-version={}, seed={seed}, config-hash={config_hash}", env!("CARGO_PKG_VERSION"))
}

pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path, seed: u64, config_hash: &str) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), seed, config_hash)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, seed: u64, config_hash: &str) -> Result<Self> {
        writeln!(out, "{}", header_line(seed, config_hash))?;
        Ok(Self {
            inner: csv::Writer::from_writer(out),
        })
    }

    pub fn row<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row).map_err(std::io::Error::from)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| e.into_error().into())
    }
}

/// One training step, in output column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub step: u64,
    pub alpha: f64,
    pub delta_hat: f64,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub rel_l2: Option<f64>,
    pub wall_ms: Option<f64>,
    pub peak_tmp_elems: usize,
}

impl From<&StepRecord> for TrainRow {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            alpha: r.alpha,
            delta_hat: r.delta_hat,
            loss_plus: r.loss_plus,
            loss_minus: r.loss_minus,
            rel_l2: r.rel_l2,
            wall_ms: r.wall_ms,
            peak_tmp_elems: r.peak_tmp_elems,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_columns_with_blank_optionals() {
        let mut w = MetricsWriter::new(Vec::new(), 7, "abc").unwrap();
        let rec = StepRecord {
            step: 1,
            delta_hat: -0.5,
            loss_plus: 2.0,
            loss_minus: 3.0,
            alpha: 0.1,
            rel_l2: None,
            wall_ms: None,
            peak_tmp_elems: 12,
        };
        w.row(&TrainRow::from(&rec)).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# sdze-version=") && lines[0].ends_with("seed=7, config-hash=abc"));
        assert_eq!(lines[1], "step,alpha,delta_hat,loss_plus,loss_minus,rel_l2,wall_ms,peak_tmp_elems");
        assert_eq!(lines[2], "1,0.1,-0.5,2.0,3.0,,,12");
    }
}
