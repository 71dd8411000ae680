//! Scalar volumes and one-hot label fields.

use jers_tensor::Tensor;

use crate::error::{CoreError, Result};

/// Tolerance on per-voxel channel sums of soft label masks.
pub const SOFT_SUM_TOL: f64 = 1e-4;

/// Dense `[X, Y, Z]` intensity field.
#[derive(Clone, Debug)]
pub struct Volume {
    pub data: Tensor<f32>,
    /// Voxel size in mm; metadata only.
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Ok(Self {
            data: Tensor::new(&dims, data)?,
            spacing: [1.0; 3],
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::new(dims, vec![0.0; dims.iter().product()]).expect("valid dims")
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn values(&self) -> &[f32] {
        self.data.data()
    }

    pub fn len(&self) -> usize {
        self.data.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Min-max rescale to `[0, 1]`; constant volumes become all zeros.
    pub fn normalized(&self) -> Result<Self> {
        let v = self.values();
        let (lo, hi) = v
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| {
                (l.min(x), h.max(x))
            });
        let span = hi - lo;
        let data = if span > 0.0 {
            v.iter().map(|&x| (x - lo) / span).collect()
        } else {
            vec![0.0; v.len()]
        };
        Ok(Self {
            data: Tensor::new(&self.dims(), data)?,
            spacing: self.spacing,
        })
    }

    /// Shape `[1, 1, X, Y, Z]` view in another precision, ready for convolution.
    pub fn batched<T: jers_tensor::Real>(&self) -> Result<Tensor<T>> {
        let [x, y, z] = self.dims();
        Ok(self.data.cast::<T>().reshape(&[1, 1, x, y, z])?)
    }
}

/// `[C, X, Y, Z]` per-voxel class memberships; channel 0 is background.
#[derive(Clone, Debug)]
pub struct LabelMask {
    pub data: Tensor<f32>,
    pub class_names: Vec<String>,
}

impl LabelMask {
    pub fn new(class_names: Vec<String>, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let shape = [class_names.len(), dims[0], dims[1], dims[2]];
        Ok(Self {
            data: Tensor::new(&shape, data)?,
            class_names,
        })
    }

    /// One-hot encoding of per-voxel class indices.
    pub fn from_indices(class_names: Vec<String>, dims: [usize; 3], idx: &[usize]) -> Result<Self> {
        let c = class_names.len();
        let n: usize = dims.iter().product();
        if idx.len() != n {
            return Err(CoreError::Value(format!(
                "{} class indices for {} voxels",
                idx.len(),
                n
            )));
        }
        let mut data = vec![0.0f32; c * n];
        for (v, &k) in idx.iter().enumerate() {
            if k >= c {
                return Err(CoreError::Value(format!(
                    "class index {k} out of range for {c} classes"
                )));
            }
            data[k * n + v] = 1.0;
        }
        Self::new(class_names, dims, data)
    }

    pub fn classes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxels(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data.data()[c * n..(c + 1) * n]
    }

    /// Per-voxel argmax (lowest index wins ties).
    pub fn argmax(&self) -> Vec<usize> {
        let (c, n) = (self.classes(), self.voxels());
        let d = self.data.data();
        (0..n)
            .map(|v| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * n + v] > d[best * n + v] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Hard one-hot mask from the per-voxel argmax.
    pub fn harden(&self) -> Result<Self> {
        Self::from_indices(self.class_names.clone(), self.dims(), &self.argmax())
    }

    pub fn is_hard(&self) -> bool {
        let (c, n) = (self.classes(), self.voxels());
        let d = self.data.data();
        d.iter().all(|&v| v == 0.0 || v == 1.0)
            && (0..n).all(|v| (0..c).map(|k| d[k * n + v]).sum::<f32>() == 1.0)
    }

    /// Largest deviation of a per-voxel channel sum from 1.
    pub fn max_sum_error(&self) -> f64 {
        let (c, n) = (self.classes(), self.voxels());
        let d = self.data.data();
        (0..n)
            .map(|v| ((0..c).map(|k| d[k * n + v] as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Binary foreground (any non-background class) of a hard mask.
    pub fn foreground(&self) -> Vec<f32> {
        self.argmax()
            .into_iter()
            .map(|k| if k == 0 { 0.0 } else { 1.0 })
            .collect()
    }
}

pub fn default_class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|k| {
            if k == 0 {
                "background".to_string()
            } else {
                format!("region_{k}")
            }
        })
        .collect()
}
