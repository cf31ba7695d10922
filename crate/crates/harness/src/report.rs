//! Summaries and plot data rebuilt from a run directory's artifacts alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sparsetune_core::kernels::bench::BenchRow;
use sparsetune_core::predictor::PredictorTrainingRecord;
use sparsetune_core::Component;

use crate::error::{io, HarnessError, Result};
use crate::metrics::{read_csv, read_json, write_csv, write_json, LedgerRow, MetricsRecord};
use crate::pipeline::{ProfileSummary, ThresholdArtifact, PREDICTOR_CURVE, THRESHOLDS_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_loss_sparse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedPoint {
    pub step: u64,
    pub layer: usize,
    pub attention: f64,
    pub mlp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub layer: usize,
    pub component: Component,
    pub init: f64,
    pub tuned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub final_eval_loss_sparse: Option<f64>,
    pub mean_retained_attention: Vec<f64>,
    pub mean_retained_mlp: Vec<f64>,
    pub max_peak_total: usize,
    pub max_peak_activation: usize,
    pub median_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub best_recall: Option<f64>,
    pub final_recall: Option<f64>,
    pub final_param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummaryRow {
    pub kernel: String,
    pub s: usize,
    pub k_or_n: usize,
    pub speedup: f64,
    pub transient_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Report {
    pub training: Option<TrainingSummary>,
    pub thresholds: Option<Vec<ThresholdRow>>,
    pub profile_undefined_rows: Option<usize>,
    pub predictor: Option<PredictorReport>,
    pub bench: Option<Vec<BenchSummaryRow>>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn training(records: &[MetricsRecord]) -> Option<TrainingSummary> {
    let first = records.first()?;
    let last = records.last()?;
    let n_layers = first.retained.len();
    let n = records.len() as f64;
    let mean = |l: usize, attn: bool| records.iter().map(|r| if attn { r.retained[l].attention } else { r.retained[l].mlp }).sum::<f64>() / n;
    Some(TrainingSummary {
        steps: records.len(),
        first_loss: first.loss,
        final_loss: last.loss,
        final_eval_loss: records.iter().rev().find_map(|r| r.eval_loss),
        final_eval_loss_sparse: records.iter().rev().find_map(|r| r.eval_loss_sparse),
        mean_retained_attention: (0..n_layers).map(|l| mean(l, true)).collect(),
        mean_retained_mlp: (0..n_layers).map(|l| mean(l, false)).collect(),
        max_peak_total: records.iter().map(|r| r.peak_total).max().unwrap_or(0),
        max_peak_activation: records.iter().map(|r| r.peak_activation).max().unwrap_or(0),
        median_wall_ms: median(records.iter().map(|r| r.wall_ms).collect()),
    })
}

/// Reads whatever artifacts `dir` holds and writes `report/` next to them.
/// Fails only when none are present or one is unreadable.
pub fn report(dir: &Path) -> Result<Report> {
    let out = dir.join("report");
    let mut rep = Report::default();
    let metrics = dir.join("metrics.json");
    if metrics.exists() {
        let records: Vec<MetricsRecord> = read_json(&metrics)?;
        io(&out, std::fs::create_dir_all(&out))?;
        let loss: Vec<LossPoint> = records
            .iter()
            .map(|r| LossPoint { step: r.step, loss: r.loss, eval_loss: r.eval_loss, eval_loss_sparse: r.eval_loss_sparse })
            .collect();
        write_csv(&out.join("loss_curve.csv"), &loss)?;
        let retained: Vec<RetainedPoint> = records
            .iter()
            .flat_map(|r| r.retained.iter().enumerate().map(|(layer, x)| RetainedPoint { step: r.step, layer, attention: x.attention, mlp: x.mlp }))
            .collect();
        write_csv(&out.join("retained.csv"), &retained)?;
        rep.training = training(&records);
    }
    let ledger = dir.join("ledger.csv");
    if ledger.exists() {
        io(&out, std::fs::create_dir_all(&out))?;
        let rows: Vec<LedgerRow> = read_csv(&ledger)?;
        write_csv(&out.join("memory.csv"), &rows)?;
    }
    let thresholds = dir.join(THRESHOLDS_FILE);
    if thresholds.exists() {
        let art: ThresholdArtifact = read_json(&thresholds)?;
        let rows: Vec<ThresholdRow> = art
            .init
            .entries()
            .iter()
            .map(|e| ThresholdRow { layer: e.layer, component: e.component, init: e.value, tuned: art.tuned.get(e.layer, e.component).unwrap_or(f64::NAN) })
            .collect();
        io(&out, std::fs::create_dir_all(&out))?;
        write_csv(&out.join("thresholds.csv"), &rows)?;
        rep.thresholds = Some(rows);
    }
    let profile = dir.join("profiles/summary.json");
    if profile.exists() {
        let p: ProfileSummary = read_json(&profile)?;
        rep.profile_undefined_rows = Some(p.undefined_rows);
    }
    let curve = dir.join(PREDICTOR_CURVE);
    if curve.exists() {
        let h: Vec<PredictorTrainingRecord> = read_csv(&curve)?;
        if let Some(last) = h.last() {
            rep.predictor = Some(PredictorReport {
                epochs: h.len(),
                final_loss: last.loss,
                best_recall: h.iter().filter_map(|r| r.recall).max_by(f64::total_cmp),
                final_recall: h.iter().rev().find_map(|r| r.recall),
                final_param_count: last.param_count,
            });
        }
    }
    let bench = dir.join("bench.json");
    if bench.exists() {
        let rows: Vec<BenchRow> = read_json(&bench)?;
        let summary: Vec<BenchSummaryRow> = rows
            .iter()
            .map(|r| BenchSummaryRow { kernel: r.kernel.clone(), s: r.s, k_or_n: r.k_or_n, speedup: r.speedup, transient_bytes: r.transient_bytes })
            .collect();
        io(&out, std::fs::create_dir_all(&out))?;
        write_csv(&out.join("bench_speedup.csv"), &summary)?;
        rep.bench = Some(summary);
    }
    if rep == Report::default() && !ledger.exists() {
        return Err(HarnessError::Contract(format!("{} holds no run artifacts", dir.display())));
    }
    io(&out, std::fs::create_dir_all(&out))?;
    write_json(&out.join("summary.json"), &rep)?;
    Ok(rep)
}
