//! Synthetic head phantoms and random affine augmentation.
//!
//! A phantom is built in a canonical frame: an ellipsoidal brain split into
//! labelled regions, a thin CSF gap, a skull shell, a scalp shell and an
//! extracranial blob. Each subject sees the canonical frame through its own
//! random pose, so subjects differ from the atlas by an affine map plus the
//! non-cerebral tissue, which is what the networks have to undo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::affine::{apply_point, compose, AffineMatrix};
use crate::error::{CoreError, Result};
use crate::resample::warp_volume;
use crate::volume::{default_class_names, LabelMask, Volume};

/// Symmetric ranges of a random affine map about the volume centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationRanges {
    /// Maximum shift per axis, voxels.
    pub translation: f64,
    /// Maximum rotation per axis, degrees.
    pub rotation_deg: f64,
    /// Isotropic scale factor range.
    pub scale: [f64; 2],
}

impl AugmentationRanges {
    pub const NONE: AugmentationRanges = AugmentationRanges {
        translation: 0.0,
        rotation_deg: 0.0,
        scale: [1.0, 1.0],
    };
    /// Ranges used for LPBA40 training.
    pub const LPBA: AugmentationRanges = AugmentationRanges {
        translation: 5.0,
        rotation_deg: 5.0,
        scale: [0.98, 1.02],
    };
    /// Ranges used for CC359 training.
    pub const CC359: AugmentationRanges = AugmentationRanges {
        translation: 3.0,
        rotation_deg: 3.0,
        scale: [0.99, 1.01],
    };

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        let ok = self.translation >= 0.0
            && self.rotation_deg >= 0.0
            && lo > 0.0
            && lo <= 1.0
            && hi >= 1.0
            && [self.translation, self.rotation_deg, lo, hi]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(CoreError::Config(format!(
                "invalid augmentation ranges {self:?}"
            )));
        }
        Ok(())
    }

    /// Draws `translate * rotate * scale`; zero ranges give the exact identity.
    pub fn sample(&self, rng: &mut impl Rng) -> AffineMatrix {
        let sym =
            |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let t = [
            sym(rng, self.translation),
            sym(rng, self.translation),
            sym(rng, self.translation),
        ];
        let a = [
            sym(rng, self.rotation_deg),
            sym(rng, self.rotation_deg),
            sym(rng, self.rotation_deg),
        ];
        let [lo, hi] = self.scale;
        let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        compose(
            &AffineMatrix::translation(t),
            &compose(
                &AffineMatrix::rotation_deg(a),
                &AffineMatrix::scaling([s, s, s]),
            ),
        )
    }
}

/// Applies one random affine drawn from `ranges` with the given seed.
pub fn augment(s: &Volume, ranges: &AugmentationRanges, seed: u64) -> Result<Volume> {
    ranges.validate()?;
    let a = ranges.sample(&mut ChaCha8Rng::seed_from_u64(seed));
    warp_volume(s, &a)
}

/// Mean intensity of each tissue before noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueIntensities {
    pub csf: f64,
    pub skull: f64,
    pub scalp: f64,
    pub blob: f64,
    /// One value per brain region (classes 1..C).
    pub regions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub resolution: [usize; 3],
    /// Including background.
    pub classes: usize,
    /// Canonical brain semi-axes, voxels.
    pub brain_semi_axes: [f64; 3],
    /// Per-subject relative jitter of each semi-axis.
    pub brain_axis_jitter: f64,
    /// Inner region semi-axes as a fraction of the brain's.
    pub core_fraction: f64,
    pub csf_gap: f64,
    pub skull_thickness: [f64; 2],
    pub scalp_thickness: [f64; 2],
    /// Extracranial blob radius range; `[0, 0]` disables it.
    pub blob_radius: [f64; 2],
    pub intensities: TissueIntensities,
    pub noise_sigma: f64,
    /// Per-subject head pose ranges.
    pub pose: AugmentationRanges,
    /// Sub-samples per axis for partial-volume intensities.
    pub supersample: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::with_classes(4)
    }
}

impl PhantomSpec {
    pub fn with_classes(classes: usize) -> Self {
        let regions = match classes {
            0 | 1 => Vec::new(),
            2 => vec![0.6],
            _ => {
                let mut r = vec![0.78];
                r.extend((0..classes - 2).map(|k| 0.48 + 0.04 * k as f64));
                r
            }
        };
        Self {
            resolution: [32, 32, 32],
            classes,
            brain_semi_axes: [11.0, 9.5, 10.0],
            brain_axis_jitter: 0.04,
            core_fraction: 0.55,
            csf_gap: 1.0,
            skull_thickness: [1.2, 2.0],
            scalp_thickness: [1.0, 1.6],
            blob_radius: [2.5, 3.5],
            intensities: TissueIntensities {
                csf: 0.08,
                skull: 0.95,
                scalp: 0.62,
                blob: 0.85,
                regions,
            },
            noise_sigma: 0.03,
            pose: AugmentationRanges {
                translation: 2.0,
                rotation_deg: 8.0,
                scale: [0.95, 1.05],
            },
            supersample: 2,
        }
    }

    /// Same geometry at another resolution, lengths scaled with the grid.
    pub fn scaled_to(&self, resolution: [usize; 3]) -> Self {
        let f = resolution[0] as f64 / self.resolution[0] as f64;
        let mut s = self.clone();
        s.resolution = resolution;
        s.brain_semi_axes = self.brain_semi_axes.map(|a| a * f);
        s.csf_gap *= f;
        s.skull_thickness = self.skull_thickness.map(|a| a * f);
        s.scalp_thickness = self.scalp_thickness.map(|a| a * f);
        s.blob_radius = self.blob_radius.map(|a| a * f);
        s.pose.translation *= f;
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("phantom spec: {m}")));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.intensities.regions.len() != self.classes - 1 {
            return bad("one region intensity per foreground class required");
        }
        if self.resolution.iter().any(|&d| d < 4) {
            return bad("resolution too small");
        }
        if self.supersample == 0
            || self.noise_sigma < 0.0
            || !(self.core_fraction > 0.0 && self.core_fraction < 1.0)
        {
            return bad("invalid sampling, noise or core fraction");
        }
        for [lo, hi] in [self.skull_thickness, self.scalp_thickness, self.blob_radius] {
            if !(lo >= 0.0 && hi >= lo) {
                return bad("ranges must satisfy 0 <= lo <= hi");
            }
        }
        self.pose.validate()?;
        let half = self.resolution.map(|d| d as f64 / 2.0);
        let max_axes = self
            .brain_semi_axes
            .map(|a| a * (1.0 + self.brain_axis_jitter));
        if (0..3).any(|i| !(self.brain_semi_axes[i] > 0.0) || max_axes[i] >= half[i]) {
            return Err(CoreError::Value(format!(
                "brain semi-axes {:?} do not fit in a {:?} volume",
                self.brain_semi_axes, self.resolution
            )));
        }
        Ok(())
    }
}

/// Per-subject geometry drawn from a [`PhantomSpec`].
#[derive(Clone, Debug)]
struct Anatomy {
    axes: [f64; 3],
    core_fraction: f64,
    csf: f64,
    skull: f64,
    scalp: f64,
    /// Blob centre and radius in the canonical frame.
    blob: Option<([f64; 3], f64)>,
    sectors: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Background,
    Csf,
    Skull,
    Scalp,
    Blob,
    /// Brain region, class index >= 1.
    Region(usize),
}

impl Anatomy {
    fn canonical(spec: &PhantomSpec) -> Self {
        Self {
            axes: spec.brain_semi_axes,
            core_fraction: spec.core_fraction,
            csf: spec.csf_gap,
            skull: spec.skull_thickness[0],
            scalp: spec.scalp_thickness[0],
            blob: None,
            sectors: spec.classes.saturating_sub(2),
        }
    }

    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let j = spec.brain_axis_jitter;
        let axes = spec
            .brain_semi_axes
            .map(|a| a * (1.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 }));
        let range = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| {
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        };
        let skull = range(rng, spec.skull_thickness);
        let scalp = range(rng, spec.scalp_thickness);
        let radius = range(rng, spec.blob_radius);
        // Blob sits just outside the scalp in the lower front octant.
        let theta = rng.gen_range(0.35..0.9f64);
        let phi = rng.gen_range(-0.6..0.6f64);
        let dir = [
            theta.cos() * phi.cos(),
            theta.cos() * phi.sin(),
            -theta.sin(),
        ];
        let reach =
            |d: [f64; 3]| 1.0 / ((0..3).map(|i| (d[i] / axes[i]).powi(2)).sum::<f64>()).sqrt();
        let dist = reach(dir) + spec.csf_gap + skull + scalp + radius * 0.8;
        let blob = (radius > 0.0).then(|| (dir.map(|d| d * dist), radius));
        Self {
            axes,
            core_fraction: spec.core_fraction,
            csf: spec.csf_gap,
            skull,
            scalp,
            blob,
            sectors: spec.classes.saturating_sub(2),
        }
    }

    /// Tissue at a canonical-frame point (measured from the centre).
    fn tissue(&self, q: [f64; 3], with_head: bool) -> Tissue {
        let r = (0..3)
            .map(|i| (q[i] / self.axes[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        if r <= 1.0 {
            return Tissue::Region(self.region(q, r));
        }
        if !with_head {
            return Tissue::Background;
        }
        // Shell distances measured along the ray, in voxels beyond the brain surface.
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let beyond = norm * (1.0 - 1.0 / r);
        if beyond <= self.csf {
            Tissue::Csf
        } else if beyond <= self.csf + self.skull {
            Tissue::Skull
        } else if beyond <= self.csf + self.skull + self.scalp {
            Tissue::Scalp
        } else if let Some((c, rad)) = self.blob {
            let d2: f64 = (0..3).map(|i| (q[i] - c[i]).powi(2)).sum();
            if d2 <= rad * rad {
                Tissue::Blob
            } else {
                Tissue::Background
            }
        } else {
            Tissue::Background
        }
    }

    /// Region index of a brain point with normalized radius `r`.
    fn region(&self, q: [f64; 3], r: f64) -> usize {
        if self.sectors == 0 {
            return 1;
        }
        if r <= self.core_fraction {
            return 1;
        }
        // Shell split into equal azimuthal sectors about the z axis.
        let az = q[1].atan2(q[0]) + std::f64::consts::PI;
        let k = ((az / (2.0 * std::f64::consts::PI)) * self.sectors as f64).floor() as usize;
        2 + k.min(self.sectors - 1)
    }
}

fn intensity(spec: &PhantomSpec, t: Tissue) -> f64 {
    let i = &spec.intensities;
    match t {
        Tissue::Background => 0.0,
        Tissue::Csf => i.csf,
        Tissue::Skull => i.skull,
        Tissue::Scalp => i.scalp,
        Tissue::Blob => i.blob,
        Tissue::Region(k) => i.regions[k - 1],
    }
}

/// A generated subject: image plus reference masks.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Volume,
    /// Binary brain mask.
    pub truth_ext: Vec<f32>,
    pub truth_seg: LabelMask,
    /// Maps subject voxel coordinates into the canonical (atlas) frame.
    pub pose: AffineMatrix,
}

fn render(
    spec: &PhantomSpec,
    anatomy: &Anatomy,
    pose: &AffineMatrix,
    with_head: bool,
    supersample: usize,
) -> (Vec<f32>, Vec<usize>) {
    let dims = spec.resolution;
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let n: usize = dims.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let ss = supersample;
    let offsets: Vec<f64> = (0..ss)
        .map(|k| (k as f64 + 0.5) / ss as f64 - 0.5)
        .collect();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let centre = anatomy.tissue(apply_point(pose, p), with_head);
                labels.push(match centre {
                    Tissue::Region(k) => k,
                    _ => 0,
                });
                let value = if ss == 1 {
                    intensity(spec, centre)
                } else {
                    let mut acc = 0.0;
                    for &dx in &offsets {
                        for &dy in &offsets {
                            for &dz in &offsets {
                                let q = apply_point(pose, [p[0] + dx, p[1] + dy, p[2] + dz]);
                                acc += intensity(spec, anatomy.tissue(q, with_head));
                            }
                        }
                    }
                    acc / (ss * ss * ss) as f64
                };
                image.push(value as f32);
            }
        }
    }
    (image, labels)
}

/// Deterministic subject for `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = Anatomy::sample(spec, &mut rng);
    let pose = spec.pose.sample(&mut rng);
    let (mut image, labels) = render(spec, &anatomy, &pose, true, spec.supersample);
    if spec.noise_sigma > 0.0 {
        let noise =
            Normal::new(0.0, spec.noise_sigma).map_err(|e| CoreError::Value(e.to_string()))?;
        for v in image.iter_mut() {
            *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    let truth_ext = labels
        .iter()
        .map(|&k| if k > 0 { 1.0 } else { 0.0 })
        .collect();
    Ok(Phantom {
        image: Volume::new(spec.resolution, image)?,
        truth_ext,
        truth_seg: LabelMask::from_indices(
            default_class_names(spec.classes),
            spec.resolution,
            &labels,
        )?,
        pose,
    })
}

/// Seed used for the atlas; the atlas itself draws no random numbers.
pub const ATLAS_SEED: u64 = 0;

/// Canonical skull-free template and its labels: unposed, noise free, brain
/// voxels classified at their centres.
pub fn make_atlas(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let _ = ATLAS_SEED;
    let anatomy = Anatomy::canonical(spec);
    let (image, labels) = render(spec, &anatomy, &AffineMatrix::IDENTITY, false, 1);
    Ok((
        Volume::new(spec.resolution, image)?,
        LabelMask::from_indices(default_class_names(spec.classes), spec.resolution, &labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec::default().scaled_to([16, 16, 16])
    }

    #[test]
    fn phantom_labels_partition_the_brain() {
        let spec = small();
        let p = generate_phantom(&spec, 3).unwrap();
        assert!(p.truth_seg.is_hard());
        assert_eq!(p.truth_ext, p.truth_seg.foreground());
        let counts: Vec<usize> = (0..4)
            .map(|c| p.truth_seg.channel(c).iter().filter(|&&v| v == 1.0).count())
            .collect();
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        assert!(p.image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn phantom_is_deterministic_per_seed() {
        let spec = small();
        let a = generate_phantom(&spec, 11).unwrap();
        let b = generate_phantom(&spec, 11).unwrap();
        let c = generate_phantom(&spec, 12).unwrap();
        assert_eq!(a.image.values(), b.image.values());
        assert_eq!(a.truth_seg.data.data(), b.truth_seg.data.data());
        assert_ne!(a.image.values(), c.image.values());
    }

    #[test]
    fn atlas_is_skull_free_and_matches_its_labels() {
        let spec = small();
        let (t, b) = make_atlas(&spec).unwrap();
        let skull = spec.intensities.skull as f32;
        assert!(t.values().iter().all(|&v| v < skull));
        let support: Vec<f32> = t
            .values()
            .iter()
            .map(|&v| if v != 0.0 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(support, b.foreground());
    }

    #[test]
    fn oversized_brain_is_rejected() {
        let mut spec = small();
        spec.brain_semi_axes = [9.0, 5.0, 5.0];
        assert!(matches!(
            generate_phantom(&spec, 0),
            Err(CoreError::Value(_))
        ));
    }

    #[test]
    fn zero_ranges_leave_the_volume_untouched() {
        let spec = small();
        let p = generate_phantom(&spec, 1).unwrap();
        let out = augment(&p.image, &AugmentationRanges::NONE, 99).unwrap();
        assert_eq!(out.values(), p.image.values());
    }
}
