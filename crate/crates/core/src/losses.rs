//! Training objective: local cross-correlation, segmentation cross-entropy and
//! mask smoothness.

use jers_tensor::ops::{
    add, add_scalar, box_sum3d, div, forward_diff, log, mean, mul, scale, square, sub, sum,
};
use jers_tensor::{Real, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pipeline::ForwardArtifacts;

/// Variance floor in the correlation denominator.
pub const NCC_EPS: f64 = 1e-5;
/// Floor inside the cross-entropy logarithm.
pub const CE_EPS: f64 = 1e-8;

/// How the smoothness term enters the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessScale {
    /// Sum of squared differences divided by the voxel count.
    #[default]
    VoxelMean,
    /// Plain sum of squared differences.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Segmentation weight.
    pub lambda: f64,
    /// Smoothness weight.
    pub eta: f64,
    pub ncc_window: usize,
    #[serde(default)]
    pub smoothness_scale: SmoothnessScale,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            eta: 1.0,
            ncc_window: 9,
            smoothness_scale: SmoothnessScale::VoxelMean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite())
            || !(self.eta >= 0.0 && self.eta.is_finite())
        {
            return Err(CoreError::Config(format!(
                "loss weights must be non-negative, got lambda {} eta {}",
                self.lambda, self.eta
            )));
        }
        if self.ncc_window == 0 || self.ncc_window % 2 == 0 {
            return Err(CoreError::Config(format!(
                "ncc_window must be odd, got {}",
                self.ncc_window
            )));
        }
        Ok(())
    }

    /// The configured window shrunk (keeping it odd) to fit `dims`.
    pub fn effective_window(&self, dims: [usize; 3]) -> usize {
        let smallest = *dims.iter().min().expect("three dims");
        let fit = if smallest % 2 == 1 {
            smallest
        } else {
            smallest - 1
        };
        self.ncc_window.min(fit).max(1)
    }
}

fn spatial_dims(shape: &[usize]) -> [usize; 3] {
    let r = shape.len();
    [shape[r - 3], shape[r - 2], shape[r - 1]]
}

/// Mean over voxels of the negated squared local correlation in a cubic
/// window. Windows are zero padded at the border; the value lies in `[-1, 0]`.
pub fn local_ncc_loss<T: Real>(w: &Tensor<T>, t: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if w.shape() != t.shape() || w.rank() < 3 {
        return Err(CoreError::Tensor(TensorError::Dimension {
            op: "local_ncc_loss",
            detail: format!("{:?} vs {:?}", w.shape(), t.shape()),
        }));
    }
    let n = (window * window * window) as f64;
    let i_sum = box_sum3d(w, window)?;
    let j_sum = box_sum3d(t, window)?;
    let i2 = box_sum3d(&square(w)?, window)?;
    let j2 = box_sum3d(&square(t)?, window)?;
    let ij = box_sum3d(&mul(w, t)?, window)?;
    let cross = sub(&ij, &scale(&mul(&i_sum, &j_sum)?, 1.0 / n)?)?;
    let i_var = sub(&i2, &scale(&square(&i_sum)?, 1.0 / n)?)?;
    let j_var = sub(&j2, &scale(&square(&j_sum)?, 1.0 / n)?)?;
    let cc = div(
        &square(&cross)?,
        &add_scalar(&mul(&i_var, &j_var)?, NCC_EPS)?,
    )?;
    Ok(scale(&mean(&cc)?, -1.0)?)
}

/// Mean over voxels of `-sum_c V_c log(R_c + eps)` for `[.., C, X, Y, Z]` inputs.
pub fn cross_entropy_seg<T: Real>(r: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if r.shape() != v.shape() || r.rank() < 4 {
        return Err(CoreError::Tensor(TensorError::Dimension {
            op: "cross_entropy_seg",
            detail: format!("{:?} vs {:?}", r.shape(), v.shape()),
        }));
    }
    let voxels: usize = spatial_dims(r.shape()).iter().product::<usize>()
        * r.shape()[..r.rank() - 4].iter().product::<usize>();
    let ll = mul(v, &log(&add_scalar(r, CE_EPS)?)?)?;
    Ok(scale(&sum(&ll)?, -1.0 / voxels as f64)?)
}

/// Sum over voxels of the squared forward-difference gradient magnitude, with
/// a replicate boundary.
pub fn mask_smoothness<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let mut total: Option<Tensor<T>> = None;
    for axis in 0..3 {
        let s = sum(&square(&forward_diff(m, axis)?)?)?;
        total = Some(match total {
            None => s,
            Some(t) => add(&t, &s)?,
        });
    }
    Ok(total.expect("three axes"))
}

/// Individual objective terms (unweighted) and their weighted total.
#[derive(Clone, Debug)]
pub struct LossTerms<T: Real> {
    pub similarity: Tensor<T>,
    pub segmentation: Tensor<T>,
    pub smoothness: Tensor<T>,
    pub total: Tensor<T>,
}

impl<T: Real> LossTerms<T> {
    pub fn values(&self) -> LossValues {
        LossValues {
            similarity: self.similarity.item().as_f64(),
            segmentation: self.segmentation.item().as_f64(),
            smoothness: self.smoothness.item().as_f64(),
            total: self.total.item().as_f64(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub similarity: f64,
    pub segmentation: f64,
    pub smoothness: f64,
    pub total: f64,
}

fn term<T: Real>(name: &'static str, r: Result<Tensor<T>>) -> Result<Tensor<T>> {
    r.map_err(|e| match e {
        CoreError::Tensor(source @ TensorError::NumericFault { .. }) => {
            CoreError::NumericTerm { term: name, source }
        }
        other => other,
    })
}

/// `NCC(W^N, T) + lambda * CE(R, V) + eta * sum_j smooth(M^j)`.
///
/// The smoothness term is divided by the voxel count under
/// [`SmoothnessScale::VoxelMean`]. Artifacts without a segmentation
/// prediction (the warped-label variant) contribute a zero segmentation term.
pub fn total_loss<T: Real>(
    art: &ForwardArtifacts<T>,
    target: &Tensor<T>,
    weights: &LossWeights,
) -> Result<LossTerms<T>> {
    weights.validate()?;
    let warped = art.warped.last().expect("at least one registration stage");
    let window = weights.effective_window(spatial_dims(warped.shape()));
    let similarity = term("similarity", local_ncc_loss(warped, target, window))?;
    let segmentation = match &art.prediction {
        Some(r) => term("segmentation", cross_entropy_seg(r, &art.warped_labels))?,
        None => Tensor::scalar(T::zero()),
    };
    let mut smoothness = Tensor::scalar(T::zero());
    for m in &art.masks {
        smoothness = term(
            "smoothness",
            mask_smoothness(m).and_then(|s| Ok(add(&smoothness, &s)?)),
        )?;
    }
    let smooth_norm = match weights.smoothness_scale {
        SmoothnessScale::VoxelMean => {
            1.0 / spatial_dims(warped.shape()).iter().product::<usize>() as f64
        }
        SmoothnessScale::Sum => 1.0,
    };
    let total = term(
        "total",
        (|| {
            let a = add(&similarity, &scale(&segmentation, weights.lambda)?)?;
            Ok(add(&a, &scale(&smoothness, weights.eta * smooth_norm)?)?)
        })(),
    )?;
    Ok(LossTerms {
        similarity,
        segmentation,
        smoothness,
        total,
    })
}
