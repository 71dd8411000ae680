//! Evaluation metrics: Dice overlap and histogram mutual information.

use std::io::Write;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::volume::LabelMask;

/// Default histogram resolution for [`mutual_information`].
pub const MI_BINS: usize = 32;

fn check_binary(name: &str, v: &[f32]) -> Result<()> {
    match v.iter().position(|&x| x != 0.0 && x != 1.0) {
        None => Ok(()),
        Some(i) => Err(CoreError::Value(format!(
            "{name} mask is not binary: value {} at voxel {i}",
            v[i]
        ))),
    }
}

/// `2 |P & T| / (|P| + |T|)`; two empty masks score 1.
pub fn dice(pred: &[f32], truth: &[f32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(CoreError::Value(format!(
            "dice on {} vs {} voxels",
            pred.len(),
            truth.len()
        )));
    }
    check_binary("predicted", pred)?;
    check_binary("reference", truth)?;
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (a, b) = (a == 1.0, b == 1.0);
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Per-class Dice of two hard label masks, background optionally skipped.
pub fn per_class_dice(
    pred: &LabelMask,
    truth: &LabelMask,
    exclude_background: bool,
) -> Result<Vec<f64>> {
    if pred.data.shape() != truth.data.shape() {
        return Err(CoreError::Value(format!(
            "label shapes {:?} vs {:?}",
            pred.data.shape(),
            truth.data.shape()
        )));
    }
    let first = usize::from(exclude_background);
    (first..pred.classes())
        .map(|c| dice(pred.channel(c), truth.channel(c)))
        .collect()
}

pub fn mean_multiclass_dice(
    pred: &LabelMask,
    truth: &LabelMask,
    exclude_background: bool,
) -> Result<f64> {
    let d = per_class_dice(pred, truth, exclude_background)?;
    if d.is_empty() {
        return Err(CoreError::Value("no classes left to score".into()));
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn bin_of(v: f32, bins: usize) -> usize {
    let b = (v.clamp(0.0, 1.0) as f64 * bins as f64).floor() as usize;
    b.min(bins - 1)
}

/// Mutual information (nats) of the joint intensity histogram over
/// `[0, 1] x [0, 1]` with `bins` equal-width bins per axis.
pub fn mutual_information(w: &[f32], t: &[f32], bins: usize) -> Result<f64> {
    if w.len() != t.len() || w.is_empty() {
        return Err(CoreError::Value(format!(
            "mutual information on {} vs {} voxels",
            w.len(),
            t.len()
        )));
    }
    if bins < 2 {
        return Err(CoreError::Value(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let mut joint = vec![0u64; bins * bins];
    for (&a, &b) in w.iter().zip(t) {
        joint[bin_of(a, bins) * bins + bin_of(b, bins)] += 1;
    }
    let n = w.len() as f64;
    let mut pw = vec![0.0f64; bins];
    let mut pt = vec![0.0f64; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 / n;
            pw[i] += p;
            pt[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p / (pw[i] * pt[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Scores of one evaluated case.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice_ext: f64,
    pub mi_reg: f64,
    pub dice_seg_mean: f64,
    /// Foreground classes only, in class order.
    pub dice_seg_class: Vec<f64>,
}

/// Per-case table plus means.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub rows: Vec<CaseMetrics>,
}

/// Column means of a report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub dice_ext: f64,
    pub mi_reg: f64,
    pub dice_seg: f64,
}

impl MetricsReport {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            class_names,
            rows: Vec::new(),
        }
    }

    pub fn summary(&self) -> MetricsSummary {
        let n = self.rows.len().max(1) as f64;
        let avg = |f: fn(&CaseMetrics) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        MetricsSummary {
            dice_ext: avg(|r| r.dice_ext),
            mi_reg: avg(|r| r.mi_reg),
            dice_seg: avg(|r| r.dice_seg_mean),
        }
    }

    /// CSV with columns `case_id, dice_ext, mi_reg, dice_seg_mean,
    /// dice_seg_class_<k>...`, one row per case.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "case_id".to_string(),
            "dice_ext".into(),
            "mi_reg".into(),
            "dice_seg_mean".into(),
        ];
        let classes = self
            .rows
            .first()
            .map_or(self.class_names.len().saturating_sub(1), |r| {
                r.dice_seg_class.len()
            });
        header.extend((1..=classes).map(|k| format!("dice_seg_class_{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.case_id.clone(),
                fmt(r.dice_ext),
                fmt(r.mi_reg),
                fmt(r.dice_seg_mean),
            ];
            rec.extend(r.dice_seg_class.iter().map(|&d| fmt(d)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CoreError::io("csv", e))?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::format("csv", e.to_string())
}
