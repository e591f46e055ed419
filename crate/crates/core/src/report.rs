//! Tidy CSV tables for external plotting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::RunRecord;

pub const CURVE_HEADER: [&str; 5] = ["model_kind", "seed", "step", "metric", "value"];
pub const SWEEP_HEADER: [&str; 5] = ["model_kind", "seed", "num_skills", "metric", "value"];

/// Metrics emitted per `history.csv` row.
pub const HISTORY_METRICS: [&str; 4] = ["loss", "reg_loss", "lr_z", "lr_phi"];
/// Metrics emitted per evaluation.
pub const EVAL_METRICS: [&str; 2] = ["train_loss", "dev_loss"];

/// One row of a long-format table; `key` is the step or the inventory size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub model_kind: String,
    pub seed: u64,
    pub key: usize,
    pub metric: String,
    pub value: f64,
}

pub fn write_long_csv(header: &[&str; 5], rows: &[LongRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record([
            r.model_kind.clone(),
            r.seed.to_string(),
            r.key.to_string(),
            r.metric.clone(),
            r.value.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

pub fn read_long_csv(header: &[&str; 5], text: &str) -> Result<Vec<LongRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().ne(header.iter().copied()) {
        return Err(Error::State(format!("unexpected csv header {:?}", r.headers()?)));
    }
    let bad = |rec: &csv::StringRecord| Error::State(format!("malformed csv row {rec:?}"));
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(LongRow {
                model_kind: rec.get(0).ok_or_else(|| bad(&rec))?.to_string(),
                seed: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad(&rec))?,
                key: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad(&rec))?,
                metric: rec.get(3).ok_or_else(|| bad(&rec))?.to_string(),
                value: rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad(&rec))?,
            })
        })
        .collect()
}

/// Per-step training curves: one row per history row and metric.
pub fn history_curve_rows(records: &[RunRecord]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for rec in records {
        let kind = rec.summary.model_kind.to_string();
        for h in &rec.history {
            for (metric, value) in HISTORY_METRICS.iter().zip([h.loss, h.reg_loss, h.lr_z, h.lr_phi]) {
                out.push(LongRow {
                    model_kind: kind.clone(),
                    seed: rec.summary.seed,
                    key: h.step,
                    metric: metric.to_string(),
                    value,
                });
            }
        }
    }
    out
}

/// Mean train and dev loss at each evaluation.
pub fn eval_curve_rows(records: &[RunRecord]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for rec in records {
        let kind = rec.summary.model_kind.to_string();
        for e in &rec.evals {
            for (metric, value) in EVAL_METRICS.iter().zip([e.train_loss, e.dev_loss]) {
                out.push(LongRow {
                    model_kind: kind.clone(),
                    seed: rec.summary.seed,
                    key: e.step,
                    metric: metric.to_string(),
                    value,
                });
            }
        }
    }
    out
}

/// Allocation statistics and scores keyed by inventory size. Allocation
/// metrics are averaged over layers; missing values are skipped.
pub fn sweep_rows(records: &[RunRecord]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for rec in records {
        let s = &rec.summary;
        let values = [
            ("discreteness", s.layer_mean(|l| l.metrics.map(|m| m.discreteness))),
            ("sparsity", s.layer_mean(|l| l.metrics.map(|m| m.sparsity))),
            ("usage", s.layer_mean(|l| l.metrics.map(|m| m.usage))),
            ("recovery", s.layer_mean(|l| l.recovery.as_ref().map(|r| r.cell_accuracy))),
            ("train_loss", s.mean_train_loss),
            ("few_shot_loss", s.mean_few_shot_loss),
        ];
        for (metric, value) in values {
            if let Some(value) = value {
                out.push(LongRow {
                    model_kind: s.model_kind.to_string(),
                    seed: s.seed,
                    key: s.num_skills,
                    metric: metric.to_string(),
                    value,
                });
            }
        }
    }
    out
}

pub fn sweep_metrics_csv(records: &[RunRecord]) -> Result<String> {
    write_long_csv(&SWEEP_HEADER, &sweep_rows(records))
}

/// One wide row per run with the headline numbers.
pub fn comparison_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model_kind",
        "seed",
        "num_skills",
        "status",
        "mean_train_loss",
        "mean_few_shot_loss",
        "steps_to_threshold",
        "recovery",
        "skill_params",
        "total_params",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for rec in records {
        let s = &rec.summary;
        let p = &s.parameters;
        w.write_record([
            s.model_kind.to_string(),
            s.seed.to_string(),
            s.num_skills.to_string(),
            serde_json::to_value(s.status)?.as_str().unwrap_or_default().to_string(),
            opt(s.mean_train_loss),
            opt(s.mean_few_shot_loss),
            s.steps_to_threshold.map(|v| v.to_string()).unwrap_or_default(),
            opt(s.layer_mean(|l| l.recovery.as_ref().map(|r| r.cell_accuracy))),
            p.skill.to_string(),
            (p.allocation + p.skill + p.base + p.embedding + p.generator).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotFiles {
    pub curves: PathBuf,
    pub eval_curves: PathBuf,
    pub sweep: PathBuf,
}

/// Writes `curves.csv`, `eval_curves.csv` and `sweep_metrics.csv` into `out_dir`.
pub fn emit_plot_data(records: &[RunRecord], out_dir: &Path) -> Result<PlotFiles> {
    if records.is_empty() {
        return Err(Error::contract("emit_plot_data needs at least one record"));
    }
    fs::create_dir_all(out_dir)?;
    let files = PlotFiles {
        curves: out_dir.join("curves.csv"),
        eval_curves: out_dir.join("eval_curves.csv"),
        sweep: out_dir.join("sweep_metrics.csv"),
    };
    fs::write(&files.curves, write_long_csv(&CURVE_HEADER, &history_curve_rows(records))?)?;
    fs::write(&files.eval_curves, write_long_csv(&CURVE_HEADER, &eval_curve_rows(records))?)?;
    fs::write(&files.sweep, sweep_metrics_csv(records)?)?;
    Ok(files)
}
