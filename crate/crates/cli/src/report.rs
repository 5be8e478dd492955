//! CSV tables. Floats use shortest round-trip formatting, so identical runs
//! give identical bytes.
//!
//! | table        | columns                                                            |
//! |--------------|--------------------------------------------------------------------|
//! | metrics      | `scenario_id`, the seven metric columns; last row `mean`           |
//! | pretrain log | `epoch, L_H, L_F, L_L, L_MAE, lr`                                  |
//! | finetune log | `epoch, loss, regression, classification, lr`, the seven metrics   |
//! | sweep        | `axis, value, seed, config_hash, pretrain_L_MAE`, the seven metrics |
//!
//! The metric columns are `minADE_1, minFDE_1, MR_1, minADE_6, minFDE_6,
//! MR_6, brier_minFDE_6`. Fine-tuning epochs without validation leave them
//! empty.

use std::path::Path;

use motion_mae_core::metrics::{MetricReport, MetricValues};

use crate::error::{io_err, Result};
use crate::experiment::{FinetuneEpoch, PretrainEpoch, SweepRow};

fn table(header: Vec<String>, rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn header(lead: &[&str]) -> Vec<String> {
    lead.iter().chain(MetricValues::COLUMNS.iter()).map(|s| s.to_string()).collect()
}

fn metric_cells(v: Option<&MetricValues>) -> impl Iterator<Item = String> {
    let cells: Vec<String> = match v {
        Some(v) => v.to_array().iter().map(f64::to_string).collect(),
        None => vec![String::new(); 7],
    };
    cells.into_iter()
}

pub fn metric_report_csv(report: &MetricReport) -> Result<String> {
    let rows = report
        .scenes
        .iter()
        .map(|s| (s.scenario_id.as_str(), &s.values))
        .chain([("mean", &report.mean)])
        .map(|(id, v)| std::iter::once(id.to_string()).chain(metric_cells(Some(v))).collect());
    table(header(&["scenario_id"]), rows)
}

pub fn pretrain_log_csv(log: &[PretrainEpoch]) -> Result<String> {
    let head = ["epoch", "L_H", "L_F", "L_L", "L_MAE", "lr"].map(String::from).to_vec();
    let rows = log.iter().map(|e| {
        let mut r = vec![e.epoch.to_string()];
        r.extend([e.l_h, e.l_f, e.l_l, e.l_mae, e.lr].map(|v| v.to_string()));
        r
    });
    table(head, rows)
}

pub fn finetune_log_csv(log: &[FinetuneEpoch]) -> Result<String> {
    let rows = log.iter().map(|e| {
        let mut r = vec![e.epoch.to_string()];
        r.extend([e.loss, e.regression, e.classification, e.lr].map(|v| v.to_string()));
        r.extend(metric_cells(e.val.as_ref()));
        r
    });
    table(header(&["epoch", "loss", "regression", "classification", "lr"]), rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let body = rows.iter().map(|s| {
        let mut r = vec![
            s.axis.name().to_string(),
            s.value.to_string(),
            s.seed.to_string(),
            s.config_hash.clone(),
            s.pretrain_final_loss.to_string(),
        ];
        r.extend(metric_cells(Some(&s.metrics)));
        r
    });
    table(header(&["axis", "value", "seed", "config_hash", "pretrain_L_MAE"]), body)
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}
