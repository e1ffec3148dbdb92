//! Files written for a finished scenario run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GscError, Result};
use crate::metrics::write_csv;
use crate::relabel::LabelAudit;
use crate::trainer::{EpochLog, ScenarioReport};

pub const CLASS_IOU_CSV: &str = "class_iou.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const PACE_CSV: &str = "forgetting_pace.csv";
pub const EPOCH_CSV: &str = "epoch_losses.csv";
pub const AUDIT_CSV: &str = "audit.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub method: String,
    pub step: usize,
    /// `prototypical` or `plain`.
    pub strategy: String,
    pub pixel_count: u64,
    pub case1: u64,
    pub case2: u64,
    pub ignored: u64,
    pub precision_vs_oracle: f64,
    pub recall_vs_oracle: f64,
}

impl AuditRow {
    pub fn new(method: &str, step: usize, strategy: &str, a: &LabelAudit) -> Self {
        AuditRow {
            method: method.to_string(),
            step,
            strategy: strategy.to_string(),
            pixel_count: a.pixel_count,
            case1: a.case1,
            case2: a.case2,
            ignored: a.ignored,
            precision_vs_oracle: a.precision(),
            recall_vs_oracle: a.recall(),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-epoch loss components. The psi columns cover background and every
/// old step of the scenario; entries that do not apply are empty.
pub fn write_epoch_log(path: &Path, rows: &[(String, EpochLog)], old_steps: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| GscError::Format(e.to_string()))?;
    let mut header: Vec<String> = [
        "method",
        "step",
        "epoch",
        "lr",
        "l_sg",
        "l_sr",
        "l_sc",
        "l_pd",
        "total",
        "psi_background",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..old_steps).map(|m| format!("psi_step{m}")));
    w.write_record(&header).map_err(|e| GscError::Format(e.to_string()))?;
    for (method, l) in rows {
        let mut rec = vec![
            method.clone(),
            l.step.to_string(),
            l.epoch.to_string(),
            l.lr.to_string(),
            l.l_sg.to_string(),
            l.l_sr.to_string(),
            l.l_sc.to_string(),
            l.l_pd.to_string(),
            l.total.to_string(),
            opt(l.psi_background),
        ];
        rec.extend((0..old_steps).map(|m| opt(l.psi_old_steps.get(m).copied().flatten())));
        w.write_record(&rec).map_err(|e| GscError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every report file into `dir` and returns their paths.
pub fn write_reports(report: &ScenarioReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let path = |name: &str| dir.join(name);

    write_csv(&path(CLASS_IOU_CSV), &report.class_rows())?;
    written.push(path(CLASS_IOU_CSV));
    write_csv(&path(SUMMARY_CSV), &report.summary_rows())?;
    written.push(path(SUMMARY_CSV));
    write_csv(&path(PACE_CSV), &report.pace_rows())?;
    written.push(path(PACE_CSV));

    let logs: Vec<(String, EpochLog)> = report
        .methods
        .iter()
        .flat_map(|m| m.logs.iter().map(|l| (m.label.clone(), l.clone())))
        .collect();
    write_epoch_log(&path(EPOCH_CSV), &logs, report.spec.steps().saturating_sub(1))?;
    written.push(path(EPOCH_CSV));

    let audits: Vec<AuditRow> = report
        .methods
        .iter()
        .flat_map(|m| {
            m.audits.iter().flat_map(|a| {
                [
                    AuditRow::new(&m.label, a.step, "prototypical", &a.prototypical),
                    AuditRow::new(&m.label, a.step, "plain", &a.plain),
                ]
            })
        })
        .collect();
    if !audits.is_empty() {
        write_csv(&path(AUDIT_CSV), &audits)?;
        written.push(path(AUDIT_CSV));
    }
    Ok(written)
}
