//! Confusion matrices, IoU, grouped mIoU and forgetting pace.
//!
//! Everything here is indexed by class id (0 is background), not by head
//! channel, so results are comparable across class orders.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GscError, Result};

/// Pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.k || pred >= self.k {
            return Err(GscError::contract(
                "confusion",
                format!("label ({gt}, {pred}) outside {} classes", self.k),
            ));
        }
        self.counts[gt * self.k + pred] += 1;
        Ok(())
    }

    pub fn add_pixels(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(GscError::contract("confusion", "label maps differ in length"));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.add(g as usize, p as usize)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(GscError::contract("confusion", "merging matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `TP / (TP + FP + FN)` per class; `None` when the denominator is zero.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let k = cm.classes();
    (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.get(g, c)).sum();
            let d = tp + fp + fn_;
            (d > 0).then(|| tp as f64 / d as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupedMiou {
    /// Background plus the base classes.
    pub initial: Option<f64>,
    /// Classes added after the base step.
    pub incremental: Option<f64>,
    pub all: Option<f64>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Means over `{0} ∪ groups[0]`, over the later groups, and over all of
/// them. `ious` is indexed by class id; absent classes are skipped.
pub fn grouped_miou(ious: &[Option<f64>], groups: &[Vec<u8>]) -> GroupedMiou {
    let at = |id: u8| ious.get(id as usize).copied().flatten();
    let initial: Vec<u8> = std::iter::once(0)
        .chain(groups.first().into_iter().flatten().copied())
        .collect();
    let incremental: Vec<u8> = groups.iter().skip(1).flatten().copied().collect();
    GroupedMiou {
        initial: mean_present(initial.iter().map(|&c| at(c))),
        incremental: mean_present(incremental.iter().map(|&c| at(c))),
        all: mean_present(initial.iter().chain(&incremental).map(|&c| at(c))),
    }
}

/// `first - last` per class; absent if either endpoint is.
pub fn forgetting_pace(first: &[Option<f64>], last: &[Option<f64>]) -> Vec<Option<f64>> {
    first.iter().zip(last).map(|(a, b)| Some((*a)? - (*b)?)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIouRow {
    pub method: String,
    pub step: usize,
    pub class_id: u8,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub step: usize,
    pub miou_initial: Option<f64>,
    pub miou_incremental: Option<f64>,
    pub miou_all: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaceRow {
    pub method: String,
    pub class_id: u8,
    pub iou_first: Option<f64>,
    pub iou_last: Option<f64>,
    pub pace: Option<f64>,
}

/// Writes `rows` as a headed CSV; absent values become empty fields.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> GscError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GscError::Io(io),
        other => GscError::Format(format!("csv: {other:?}")),
    }
}
