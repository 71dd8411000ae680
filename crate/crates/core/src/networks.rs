//! The extraction, registration and segmentation networks.
//!
//! Each network owns one parameter set that is reused at every stage it runs
//! in. Convolutions use 3x3x3 kernels, LeakyReLU activations, stride-2
//! convolutions to go down a level and nearest-neighbour upsampling to come
//! back up.

use jers_tensor::init::{kaiming_uniform, uniform};
use jers_tensor::ops::{
    add, add_channel_bias, concat, conv3d, global_avg_pool, leaky_relu, linear, softmax_channels,
    steep_sigmoid, upsample_nearest2,
};
use jers_tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Architecture hyperparameters shared by checkpoints and configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Widths of the ten extraction convolutions, encoder first.
    pub extraction_widths: [usize; 10],
    /// Widths of the six stride-2 registration convolutions.
    pub registration_widths: [usize; 6],
    pub registration_hidden: usize,
    pub segmentation_widths: [usize; 10],
    /// Number of label classes including background.
    pub classes: usize,
    pub sigmoid_slope: f64,
    pub leaky_slope: f64,
    /// Initial extraction logit; positive values start every mask near 1.
    pub extraction_init_bias: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            extraction_widths: [16, 32, 32, 64, 64, 64, 32, 32, 32, 16],
            registration_widths: [16, 32, 64, 128, 256, 512],
            registration_hidden: 128,
            segmentation_widths: [128, 256, 256, 512, 512, 512, 256, 256, 256, 128],
            classes: 4,
            sigmoid_slope: 50.0,
            leaky_slope: 0.2,
            extraction_init_bias: 0.1,
        }
    }
}

impl ArchConfig {
    /// Narrow profile for single-core runs: extraction at a quarter and
    /// segmentation at a sixteenth of the full widths. Registration keeps its
    /// widths since it only ever runs at 16^3 and below.
    pub fn desk() -> Self {
        let d = Self::default();
        Self {
            extraction_widths: d.extraction_widths.map(|w| w / 4),
            segmentation_widths: d.segmentation_widths.map(|w| w / 16),
            ..d
        }
    }

    /// Smallest widths that still exercise every layer; used by gradient checks.
    pub fn tiny(classes: usize) -> Self {
        Self {
            extraction_widths: [2, 2, 2, 3, 3, 3, 2, 2, 2, 2],
            registration_widths: [2, 2, 3, 3, 4, 4],
            registration_hidden: 4,
            segmentation_widths: [2, 2, 2, 3, 3, 3, 2, 2, 2, 2],
            classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .extraction_widths
            .iter()
            .chain(&self.registration_widths)
            .chain(&self.segmentation_widths);
        if widths.into_iter().any(|&w| w == 0) || self.registration_hidden == 0 {
            return Err(CoreError::Config("network widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(CoreError::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if !(self.sigmoid_slope > 0.0)
            || !(self.leaky_slope >= 0.0)
            || !self.extraction_init_bias.is_finite()
        {
            return Err(CoreError::Config("invalid activation parameters".into()));
        }
        Ok(())
    }
}

/// Named parameter access for optimizers and checkpoints.
pub trait Parameters<T: Real> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;
}

fn prefixed<'a, T: Real>(
    prefix: &str,
    items: Vec<(String, &'a Tensor<T>)>,
) -> Vec<(String, &'a Tensor<T>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

fn prefixed_mut<'a, T: Real>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor<T>)>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

fn cast_param<T: Real, U: Real>(t: &Tensor<T>) -> Tensor<U> {
    Tensor::param(
        t.shape(),
        t.data().iter().map(|v| U::of(v.as_f64())).collect(),
    )
    .expect("finite parameter")
}

/// 3D convolution with bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Real> Conv<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = cin * k * k * k;
        Ok(Self {
            weight: kaiming_uniform(&[cout, cin, k, k, k], fan_in, slope, rng)?,
            bias: jers_tensor::init::zeros(&[cout])?,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.weight.shape()[2];
        let y = conv3d(x, &self.weight, self.stride, k / 2)?;
        Ok(add_channel_bias(&y, &self.bias)?)
    }

    fn cast<U: Real>(&self) -> Conv<U> {
        Conv {
            weight: cast_param(&self.weight),
            bias: cast_param(&self.bias),
            stride: self.stride,
        }
    }
}

impl<T: Real> Parameters<T> for Conv<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(linear(x, &self.weight, &self.bias)?)
    }

    fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: cast_param(&self.weight),
            bias: cast_param(&self.bias),
        }
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Two-level encoder-decoder with concatenated skips and a 1x1x1 head.
#[derive(Clone, Debug)]
pub struct UNet<T: Real> {
    pub convs: Vec<Conv<T>>,
    pub head: Conv<T>,
    slope: f64,
}

impl<T: Real> UNet<T> {
    pub fn new(
        cin: usize,
        widths: [usize; 10],
        cout: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = widths;
        // (in, out, stride) per layer; layers 6 and 8 see the upsampled path
        // concatenated with the skip from layers 2 and 0.
        let plan = [
            (cin, w[0], 1),
            (w[0], w[1], 2),
            (w[1], w[2], 1),
            (w[2], w[3], 2),
            (w[3], w[4], 1),
            (w[4], w[5], 1),
            (w[5] + w[2], w[6], 1),
            (w[6], w[7], 1),
            (w[7] + w[0], w[8], 1),
            (w[8], w[9], 1),
        ];
        let convs = plan
            .iter()
            .map(|&(i, o, s)| Conv::new(i, o, 3, s, slope, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv::new(w[9], cout, 1, 1, 1.0, rng)?;
        Ok(Self { convs, head, slope })
    }

    /// `[1, Cin, X, Y, Z] -> [1, Cout, X, Y, Z]` logits.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 5 || s[2..].iter().any(|&d| d % 4 != 0) {
            return Err(CoreError::Tensor(jers_tensor::TensorError::Dimension {
                op: "unet",
                detail: format!(
                    "input must be [N, C, X, Y, Z] with extents divisible by 4, got {s:?}"
                ),
            }));
        }
        let act = |t: Tensor<T>| -> Result<Tensor<T>> { Ok(leaky_relu(&t, self.slope)?) };
        let c = &self.convs;
        let h0 = act(c[0].forward(x)?)?;
        let h1 = act(c[1].forward(&h0)?)?;
        let h2 = act(c[2].forward(&h1)?)?;
        let h3 = act(c[3].forward(&h2)?)?;
        let h4 = act(c[4].forward(&h3)?)?;
        let h5 = act(c[5].forward(&h4)?)?;
        let u1 = concat(&[&upsample_nearest2(&h5)?, &h2], 1)?;
        let h6 = act(c[6].forward(&u1)?)?;
        let h7 = act(c[7].forward(&h6)?)?;
        let u0 = concat(&[&upsample_nearest2(&h7)?, &h0], 1)?;
        let h8 = act(c[8].forward(&u0)?)?;
        let h9 = act(c[9].forward(&h8)?)?;
        self.head.forward(&h9)
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            convs: self.convs.iter().map(Conv::cast).collect(),
            head: self.head.cast(),
            slope: self.slope,
        }
    }
}

impl<T: Real> Parameters<T> for UNet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.extend(prefixed(&format!("conv{i}"), c.params()));
        }
        out.extend(prefixed("head", self.head.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("conv{i}"), c.params_mut()));
        }
        out.extend(prefixed_mut("head", self.head.params_mut()));
        out
    }
}

/// Soft brain mask predictor.
#[derive(Clone, Debug)]
pub struct ExtractionNet<T: Real> {
    pub unet: UNet<T>,
    pub slope: f64,
}

impl<T: Real> ExtractionNet<T> {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut unet = UNet::new(1, arch.extraction_widths, 1, arch.leaky_slope, rng)?;
        let ks = unet.head.weight.shape().to_vec();
        unet.head.weight = jers_tensor::init::zeros(&ks)?;
        unet.head.bias = Tensor::param(&[1], vec![T::of(arch.extraction_init_bias)])?;
        Ok(Self {
            unet,
            slope: arch.sigmoid_slope,
        })
    }

    /// `[1, 1, X, Y, Z]` image to a `[1, 1, X, Y, Z]` soft mask in (0, 1).
    pub fn forward(&self, e_prev: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(steep_sigmoid(&self.unet.forward(e_prev)?, self.slope)?)
    }

    pub fn cast<U: Real>(&self) -> ExtractionNet<U> {
        ExtractionNet {
            unet: self.unet.cast(),
            slope: self.slope,
        }
    }
}

impl<T: Real> Parameters<T> for ExtractionNet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.unet.params()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.unet.params_mut()
    }
}

/// Affine regressor: strided encoder, global pooling and a two-layer head
/// whose output is added to the identity parameters.
#[derive(Clone, Debug)]
pub struct RegistrationNet<T: Real> {
    pub convs: Vec<Conv<T>>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    slope: f64,
}

impl<T: Real> RegistrationNet<T> {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = arch.registration_widths;
        let mut convs = Vec::with_capacity(6);
        let mut cin = 2;
        for &cout in &w {
            convs.push(Conv::new(cin, cout, 3, 2, arch.leaky_slope, rng)?);
            cin = cout;
        }
        let hidden = arch.registration_hidden;
        let fc1 = Linear {
            weight: kaiming_uniform(&[hidden, w[5]], w[5], arch.leaky_slope, rng)?,
            bias: jers_tensor::init::zeros(&[hidden])?,
        };
        let fc2 = Linear {
            weight: jers_tensor::init::zeros(&[12, hidden])?,
            bias: jers_tensor::init::zeros(&[12])?,
        };
        Ok(Self {
            convs,
            fc1,
            fc2,
            slope: arch.leaky_slope,
        })
    }

    /// Predicted parameters (`identity + delta`) as a `[12]` tensor.
    pub fn forward(&self, warped: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        if warped.shape() != target.shape() {
            return Err(CoreError::Tensor(jers_tensor::TensorError::Dimension {
                op: "registration",
                detail: format!("{:?} vs {:?}", warped.shape(), target.shape()),
            }));
        }
        let mut h = concat(&[warped, target], 1)?;
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?, self.slope)?;
        }
        let pooled = global_avg_pool(&h)?;
        let hidden = leaky_relu(&self.fc1.forward(&pooled)?, self.slope)?;
        let delta = self.fc2.forward(&hidden)?.reshape(&[12])?;
        let identity = Tensor::from_f64(&[12], &crate::affine::AffineParams::IDENTITY.0)?;
        Ok(add(&delta, &identity)?)
    }

    pub fn cast<U: Real>(&self) -> RegistrationNet<U> {
        RegistrationNet {
            convs: self.convs.iter().map(Conv::cast).collect(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
            slope: self.slope,
        }
    }
}

impl<T: Real> Parameters<T> for RegistrationNet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.extend(prefixed(&format!("conv{i}"), c.params()));
        }
        out.extend(prefixed("fc1", self.fc1.params()));
        out.extend(prefixed("fc2", self.fc2.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("conv{i}"), c.params_mut()));
        }
        out.extend(prefixed_mut("fc1", self.fc1.params_mut()));
        out.extend(prefixed_mut("fc2", self.fc2.params_mut()));
        out
    }
}

/// Per-voxel class distribution predictor.
#[derive(Clone, Debug)]
pub struct SegmentationNet<T: Real> {
    pub unet: UNet<T>,
}

impl<T: Real> SegmentationNet<T> {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            unet: UNet::new(
                1,
                arch.segmentation_widths,
                arch.classes,
                arch.leaky_slope,
                rng,
            )?,
        })
    }

    /// `[1, 1, X, Y, Z]` image to `[1, C, X, Y, Z]` class probabilities.
    pub fn forward(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(softmax_channels(&self.unet.forward(s)?)?)
    }

    pub fn cast<U: Real>(&self) -> SegmentationNet<U> {
        SegmentationNet {
            unet: self.unet.cast(),
        }
    }
}

impl<T: Real> Parameters<T> for SegmentationNet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.unet.params()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.unet.params_mut()
    }
}

/// The three networks, initialised in a fixed order from one seed.
#[derive(Clone, Debug)]
pub struct Networks<T: Real> {
    pub extraction: ExtractionNet<T>,
    pub registration: RegistrationNet<T>,
    pub segmentation: SegmentationNet<T>,
}

impl<T: Real> Networks<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            extraction: ExtractionNet::new(arch, &mut rng)?,
            registration: RegistrationNet::new(arch, &mut rng)?,
            segmentation: SegmentationNet::new(arch, &mut rng)?,
        })
    }

    pub fn cast<U: Real>(&self) -> Networks<U> {
        Networks {
            extraction: self.extraction.cast(),
            registration: self.registration.cast(),
            segmentation: self.segmentation.cast(),
        }
    }

    /// Replaces every parameter with small uniform noise; used to move
    /// gradient checks away from the identity start.
    pub fn randomize(&mut self, bound: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in self.params_mut() {
            let shape = p.shape().to_vec();
            *p = uniform(&shape, bound, &mut rng)?;
        }
        Ok(())
    }
}

impl<T: Real> Parameters<T> for Networks<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("extraction", self.extraction.params());
        out.extend(prefixed("registration", self.registration.params()));
        out.extend(prefixed("segmentation", self.segmentation.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = prefixed_mut("extraction", self.extraction.params_mut());
        out.extend(prefixed_mut("registration", self.registration.params_mut()));
        out.extend(prefixed_mut("segmentation", self.segmentation.params_mut()));
        out
    }
}
