//! The staged forward pass: masking, cascaded affine alignment, inverse label
//! warping and segmentation.

use std::fmt;
use std::str::FromStr;

use jers_tensor::ops::{matmul, mul};
use jers_tensor::{no_grad, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::affine::{
    inverse_matrix, matrix_of, matrix_tensor, params_matrix, AffineMatrix, AffineParams,
};
use crate::error::{CoreError, Result};
use crate::networks::{ArchConfig, Networks};
use crate::resample::{warp, warp_labels_tensor};
use crate::volume::{LabelMask, Volume};

/// Inference threshold applied to soft masks.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Ablation variants of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Every extraction mask is all ones.
    NoExt,
    /// Every incremental transform is the identity.
    NoReg,
    /// The segmentation output is the warped atlas labels.
    NoSeg,
    /// One extraction and one registration stage.
    SingleStage,
    /// Smoothness weight forced to zero.
    NoSmooth,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoExt,
        Variant::NoReg,
        Variant::NoSeg,
        Variant::SingleStage,
        Variant::NoSmooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoExt => "no_ext",
            Variant::NoReg => "no_reg",
            Variant::NoSeg => "no_seg",
            Variant::SingleStage => "single_stage",
            Variant::NoSmooth => "no_smooth",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown variant {s:?}; expected one of full, no_ext, no_reg, no_seg, single_stage, no_smooth")))
    }
}

/// Stage counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub extraction: usize,
    pub registration: usize,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            extraction: 5,
            registration: 5,
        }
    }
}

impl Stages {
    pub fn validate(&self) -> Result<()> {
        if self.extraction == 0 || self.registration == 0 {
            return Err(CoreError::Config(format!(
                "stage counts must be at least 1, got extraction {} registration {}",
                self.extraction, self.registration
            )));
        }
        Ok(())
    }
}

/// Template image `[1, 1, X, Y, Z]` and its hard labels `[C, X, Y, Z]`.
#[derive(Clone, Debug)]
pub struct Atlas<T: Real> {
    pub image: Tensor<T>,
    pub labels: Tensor<T>,
    pub class_names: Vec<String>,
}

impl<T: Real> Atlas<T> {
    pub fn new(image: &Volume, labels: &LabelMask) -> Result<Self> {
        if image.dims() != labels.dims() {
            return Err(CoreError::Value(format!(
                "atlas image {:?} vs labels {:?}",
                image.dims(),
                labels.dims()
            )));
        }
        if !labels.is_hard() {
            return Err(CoreError::Value("atlas labels must be hard one-hot".into()));
        }
        Ok(Self {
            image: image.batched()?,
            labels: labels.data.cast(),
            class_names: labels.class_names.clone(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[2], s[3], s[4]]
    }

    pub fn classes(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn cast<U: Real>(&self) -> Atlas<U> {
        Atlas {
            image: self.image.cast(),
            labels: self.labels.cast(),
            class_names: self.class_names.clone(),
        }
    }
}

/// The three networks, their stage counts, the atlas and the active variant.
#[derive(Clone, Debug)]
pub struct JersModel<T: Real> {
    pub nets: Networks<T>,
    pub arch: ArchConfig,
    pub stages: Stages,
    pub variant: Variant,
    pub atlas: Atlas<T>,
}

impl<T: Real> JersModel<T> {
    pub fn new(arch: ArchConfig, stages: Stages, atlas: Atlas<T>, seed: u64) -> Result<Self> {
        stages.validate()?;
        if atlas.classes() != arch.classes {
            return Err(CoreError::Config(format!(
                "atlas has {} classes but the architecture expects {}",
                atlas.classes(),
                arch.classes
            )));
        }
        let nets = Networks::new(&arch, seed)?;
        Ok(Self {
            nets,
            arch,
            stages,
            variant: Variant::Full,
            atlas,
        })
    }

    pub fn cast<U: Real>(&self) -> JersModel<U> {
        JersModel {
            nets: self.nets.cast(),
            arch: self.arch.clone(),
            stages: self.stages,
            variant: self.variant,
            atlas: self.atlas.cast(),
        }
    }
}

/// Returns `model` reconfigured as the given ablation.
pub fn ablate<T: Real>(model: &JersModel<T>, variant: Variant) -> Result<JersModel<T>> {
    let mut m = model.clone();
    m.variant = variant;
    if variant == Variant::SingleStage {
        m.stages = Stages {
            extraction: 1,
            registration: 1,
        };
    }
    m.stages.validate()?;
    Ok(m)
}

/// Every intermediate of one forward pass. Images are `[1, 1, X, Y, Z]`,
/// labels `[1, C, X, Y, Z]`, matrices `[4, 4]`.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts<T: Real> {
    /// `M^1 .. M^M`; binarized in inference mode.
    pub masks: Vec<Tensor<T>>,
    /// `E^0 = S, E^1 .. E^M`.
    pub extracted: Vec<Tensor<T>>,
    /// `A_i^1 .. A_i^N`.
    pub incremental: Vec<Tensor<T>>,
    /// `A_c^0 = I, A_c^1 .. A_c^N`.
    pub composed: Vec<Tensor<T>>,
    /// `W^0 = E^M, W^1 .. W^N`.
    pub warped: Vec<Tensor<T>>,
    /// Atlas labels carried into the source frame by the inverse transform.
    pub warped_labels: Tensor<T>,
    /// Segmentation network output; `None` for the warped-label variant.
    pub prediction: Option<Tensor<T>>,
}

impl<T: Real> ForwardArtifacts<T> {
    pub fn extracted_final(&self) -> &Tensor<T> {
        self.extracted.last().expect("E^0 always present")
    }

    pub fn warped_final(&self) -> &Tensor<T> {
        self.warped.last().expect("W^0 always present")
    }

    /// The segmentation used for evaluation: the prediction, or the warped
    /// labels when there is none.
    pub fn segmentation(&self) -> &Tensor<T> {
        self.prediction.as_ref().unwrap_or(&self.warped_labels)
    }

    pub fn composed_final(&self) -> Result<AffineMatrix> {
        matrix_of(self.composed.last().expect("A_c^0 always present"))
    }
}

fn binarize<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let t = T::of(MASK_THRESHOLD);
    let data = m
        .data()
        .iter()
        .map(|&v| if v >= t { T::one() } else { T::zero() })
        .collect();
    Ok(Tensor::new(m.shape(), data)?)
}

/// Runs the full staged pass on a `[1, 1, X, Y, Z]` source image.
///
/// Training mode keeps masks soft; otherwise each mask is thresholded before
/// it is overlaid. Every `W^k` is a single resample of `E^M` under `A_c^k`.
pub fn forward<T: Real>(
    model: &JersModel<T>,
    s: &Tensor<T>,
    train_mode: bool,
) -> Result<ForwardArtifacts<T>> {
    model.stages.validate()?;
    if s.shape() != model.atlas.image.shape() {
        return Err(CoreError::Config(format!(
            "source shape {:?} does not match the configured resolution {:?}",
            s.shape(),
            model.atlas.image.shape()
        )));
    }
    let nets = &model.nets;
    let variant = model.variant;

    let mut masks = Vec::with_capacity(model.stages.extraction);
    let mut extracted = vec![s.clone()];
    for _ in 0..model.stages.extraction {
        let prev = extracted.last().expect("nonempty");
        let m = if variant == Variant::NoExt {
            Tensor::ones(s.shape())?
        } else {
            let soft = nets.extraction.forward(prev)?;
            if train_mode {
                soft
            } else {
                binarize(&soft)?
            }
        };
        let e = if variant == Variant::NoExt {
            prev.clone()
        } else {
            mul(prev, &m)?
        };
        masks.push(m);
        extracted.push(e);
    }

    let e_final = extracted.last().expect("nonempty").clone();
    let identity = matrix_tensor::<T>(&AffineMatrix::IDENTITY);
    let mut incremental = Vec::with_capacity(model.stages.registration);
    let mut composed = vec![identity.clone()];
    let mut warped = vec![e_final.clone()];
    for k in 0..model.stages.registration {
        let a_i = if variant == Variant::NoReg {
            identity.clone()
        } else {
            params_matrix(&nets.registration.forward(&warped[k], &model.atlas.image)?)?
        };
        let a_c = matmul(&a_i, &composed[k])?;
        let w = warp(&e_final, &a_c, &[0.0])?;
        incremental.push(a_i);
        composed.push(a_c);
        warped.push(w);
    }

    let inv = inverse_matrix(composed.last().expect("nonempty"))?;
    let [x, y, z] = model.atlas.dims();
    let v = warp_labels_tensor(&model.atlas.labels, &inv)?.reshape(&[
        1,
        model.atlas.classes(),
        x,
        y,
        z,
    ])?;
    let prediction = if variant == Variant::NoSeg {
        None
    } else {
        Some(nets.segmentation.forward(s)?)
    };
    Ok(ForwardArtifacts {
        masks,
        extracted,
        incremental,
        composed,
        warped,
        warped_labels: v,
        prediction,
    })
}

/// Hardened outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `E^M`.
    pub extracted: Volume,
    /// `W^N`.
    pub warped: Volume,
    /// Per-voxel argmax of the segmentation.
    pub segmentation: LabelMask,
    /// Warped atlas labels, hardened.
    pub warped_labels: LabelMask,
    /// Product of the binarized stage masks.
    pub mask: Vec<f32>,
    pub composed: AffineMatrix,
    /// Parameters of `A_c^N`.
    pub params: AffineParams,
}

fn volume_of<T: Real>(t: &Tensor<T>, dims: [usize; 3]) -> Result<Volume> {
    Volume::new(dims, t.data().iter().map(|v| v.as_f64() as f32).collect())
}

fn labels_of<T: Real>(t: &Tensor<T>, names: &[String], dims: [usize; 3]) -> Result<LabelMask> {
    LabelMask::new(
        names.to_vec(),
        dims,
        t.data().iter().map(|v| v.as_f64() as f32).collect(),
    )
}

/// Inference-mode pass with hardened outputs; records no gradients.
pub fn infer<T: Real>(model: &JersModel<T>, s: &Volume) -> Result<Inference> {
    let dims = model.atlas.dims();
    if s.dims() != dims {
        return Err(CoreError::Config(format!(
            "volume {:?} does not match the model resolution {:?}",
            s.dims(),
            dims
        )));
    }
    let art = no_grad(|| forward(model, &s.batched::<T>()?, false))?;
    let names = &model.atlas.class_names;
    let n: usize = dims.iter().product();
    let mut mask = vec![1.0f32; n];
    for m in &art.masks {
        for (acc, &v) in mask.iter_mut().zip(m.data()) {
            *acc *= v.as_f64() as f32;
        }
    }
    let composed = art.composed_final()?;
    Ok(Inference {
        extracted: volume_of(art.extracted_final(), dims)?,
        warped: volume_of(art.warped_final(), dims)?,
        segmentation: labels_of(art.segmentation(), names, dims)?.harden()?,
        warped_labels: labels_of(&art.warped_labels, names, dims)?.harden()?,
        mask,
        composed,
        params: composed.to_params(),
    })
}
