//! Scoring one subject against its reference masks.

use jers_tensor::Real;

use crate::error::Result;
use crate::metrics::{dice, mutual_information, per_class_dice, CaseMetrics, MI_BINS};
use crate::phantom::Phantom;
use crate::pipeline::{infer, Inference, JersModel};

/// Everything computed for one case, before aggregation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaseScores {
    pub dice_ext: f64,
    /// MI between `W^N` and the atlas image.
    pub mi_reg: f64,
    /// MI between `E^M` and the atlas image.
    pub mi_unregistered: f64,
    pub dice_seg_pred: f64,
    pub dice_seg_warped: f64,
    /// Per foreground class, for whichever segmentation the variant reports.
    pub dice_seg_class: Vec<f64>,
}

impl CaseScores {
    pub(crate) fn add(&mut self, o: &CaseScores) {
        self.dice_ext += o.dice_ext;
        self.mi_reg += o.mi_reg;
        self.mi_unregistered += o.mi_unregistered;
        self.dice_seg_pred += o.dice_seg_pred;
        self.dice_seg_warped += o.dice_seg_warped;
    }

    pub fn dice_seg_mean(&self) -> f64 {
        if self.dice_seg_class.is_empty() {
            return 0.0;
        }
        self.dice_seg_class.iter().sum::<f64>() / self.dice_seg_class.len() as f64
    }

    pub fn to_row(&self, case_id: &str) -> CaseMetrics {
        CaseMetrics {
            case_id: case_id.to_string(),
            dice_ext: self.dice_ext,
            mi_reg: self.mi_reg,
            dice_seg_mean: self.dice_seg_mean(),
            dice_seg_class: self.dice_seg_class.clone(),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Runs inference on a phantom and scores extraction, registration and
/// segmentation. Segmentation Dice excludes the background class.
pub fn evaluate_case<T: Real>(
    model: &JersModel<T>,
    p: &Phantom,
    _case_id: &str,
) -> Result<(CaseScores, Inference)> {
    let inf = infer(model, &p.image)?;
    let atlas: Vec<f32> = model
        .atlas
        .image
        .data()
        .iter()
        .map(|v| v.as_f64() as f32)
        .collect();
    let pred = per_class_dice(&inf.segmentation, &p.truth_seg, true)?;
    let warped = per_class_dice(&inf.warped_labels, &p.truth_seg, true)?;
    let scores = CaseScores {
        dice_ext: dice(&inf.mask, &p.truth_ext)?,
        mi_reg: mutual_information(inf.warped.values(), &atlas, MI_BINS)?,
        mi_unregistered: mutual_information(inf.extracted.values(), &atlas, MI_BINS)?,
        dice_seg_pred: mean(&pred),
        dice_seg_warped: mean(&warped),
        dice_seg_class: pred,
    };
    Ok((scores, inf))
}
