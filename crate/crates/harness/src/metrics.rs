//! Per-step metrics and ledger exports.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsetune_core::train::StepStats;

use crate::error::{format_err, io, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retained {
    pub attention: f64,
    pub mlp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    /// Held-out loss with every token retained.
    pub eval_loss: Option<f64>,
    pub eval_ppl: Option<f64>,
    /// Held-out loss under the run's own pattern policy.
    pub eval_loss_sparse: Option<f64>,
    /// Per layer.
    pub retained: Vec<Retained>,
    pub predictor_recall: Option<f64>,
    pub peak_total: usize,
    pub peak_activation: usize,
    pub peak_transient: usize,
    pub activation_attention: usize,
    pub activation_mlp: usize,
    pub post_forward_live: usize,
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub fn from_stats(s: &StepStats) -> Self {
        MetricsRecord {
            step: s.step,
            loss: s.loss,
            eval_loss: None,
            eval_ppl: None,
            eval_loss_sparse: None,
            retained: s.retained.iter().map(|&(attention, mlp)| Retained { attention, mlp }).collect(),
            predictor_recall: None,
            peak_total: s.peak_total,
            peak_activation: s.peak_activation,
            peak_transient: s.peak_transient,
            activation_attention: s.activation_attention,
            activation_mlp: s.activation_mlp,
            post_forward_live: s.post_forward_live,
            wall_ms: s.wall_ns as f64 / 1e6,
        }
    }

    fn header(n_layers: usize) -> Vec<String> {
        let mut h: Vec<String> = ["step", "loss", "eval_loss", "eval_ppl", "eval_loss_sparse", "predictor_recall"].map(String::from).to_vec();
        for l in 0..n_layers {
            h.push(format!("retained_attention_{l}"));
            h.push(format!("retained_mlp_{l}"));
        }
        h.extend(
            ["peak_total", "peak_activation", "peak_transient", "activation_attention", "activation_mlp", "post_forward_live", "wall_ms"]
                .map(String::from),
        );
        h
    }

    fn row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut r = vec![
            self.step.to_string(),
            self.loss.to_string(),
            opt(self.eval_loss),
            opt(self.eval_ppl),
            opt(self.eval_loss_sparse),
            opt(self.predictor_recall),
        ];
        for x in &self.retained {
            r.push(x.attention.to_string());
            r.push(x.mlp.to_string());
        }
        for v in [self.peak_total, self.peak_activation, self.peak_transient, self.activation_attention, self.activation_mlp, self.post_forward_live] {
            r.push(v.to_string());
        }
        r.push(self.wall_ms.to_string());
        r
    }
}

/// Appends records to `metrics.csv` as they arrive and writes
/// `metrics.json` on [`MetricsWriter::finish`].
pub struct MetricsWriter {
    csv: csv::Writer<File>,
    csv_path: PathBuf,
    json_path: PathBuf,
    n_layers: usize,
    records: Vec<MetricsRecord>,
}

impl MetricsWriter {
    pub fn create(dir: &Path, n_layers: usize) -> Result<Self> {
        let csv_path = dir.join("metrics.csv");
        let mut csv = csv::Writer::from_writer(io(&csv_path, File::create(&csv_path))?);
        csv.write_record(MetricsRecord::header(n_layers)).map_err(|e| format_err("metrics.csv", e))?;
        Ok(MetricsWriter { csv, csv_path, json_path: dir.join("metrics.json"), n_layers, records: Vec::new() })
    }

    /// Steps must strictly increase.
    pub fn push(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.step <= last.step {
                return Err(HarnessError::Contract(format!("metrics step {} after step {}", rec.step, last.step)));
            }
        }
        if rec.retained.len() != self.n_layers {
            return Err(HarnessError::Contract(format!("{} retained entries for {} layers", rec.retained.len(), self.n_layers)));
        }
        self.csv.write_record(rec.row()).map_err(|e| format_err("metrics.csv", e))?;
        io(&self.csv_path, self.csv.flush())?;
        self.records.push(rec);
        Ok(())
    }

    pub fn last_mut(&mut self) -> Option<&mut MetricsRecord> {
        self.records.last_mut()
    }

    /// Rewrites the CSV (picking up late edits to the last record) and
    /// writes the JSON array.
    pub fn finish(self) -> Result<Vec<MetricsRecord>> {
        drop(self.csv);
        let mut w = csv::Writer::from_writer(io(&self.csv_path, File::create(&self.csv_path))?);
        w.write_record(MetricsRecord::header(self.n_layers)).map_err(|e| format_err("metrics.csv", e))?;
        for r in &self.records {
            w.write_record(r.row()).map_err(|e| format_err("metrics.csv", e))?;
        }
        io(&self.csv_path, w.flush())?;
        write_json(&self.json_path, &self.records)?;
        Ok(self.records)
    }
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(path.display().to_string(), e))?;
    io(path, std::fs::write(path, text))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = io(path, std::fs::read_to_string(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path.display().to_string(), e))
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(io(path, File::create(path))?);
    for r in rows {
        w.serialize(r).map_err(|e| format_err(path.display().to_string(), e))?;
    }
    io(path, w.flush())
}

pub fn read_csv<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_reader(io(path, File::open(path))?);
    r.deserialize().map(|x| x.map_err(|e| format_err(path.display().to_string(), e))).collect()
}

/// One row per step of `ledger.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub step: u64,
    pub peak_total: usize,
    pub peak_activation: usize,
    pub peak_transient: usize,
    pub post_forward_live: usize,
    pub activation_attention: usize,
    pub activation_mlp: usize,
    pub leaked: usize,
}

impl LedgerRow {
    pub fn from_stats(s: &StepStats) -> Self {
        LedgerRow {
            step: s.step,
            peak_total: s.peak_total,
            peak_activation: s.peak_activation,
            peak_transient: s.peak_transient,
            post_forward_live: s.post_forward_live,
            activation_attention: s.activation_attention,
            activation_mlp: s.activation_mlp,
            leaked: s.leaked,
        }
    }
}

/// Live bytes over one step, for peak plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub step: u64,
    pub timestamp: u64,
    pub live_bytes: usize,
}
