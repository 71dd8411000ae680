//! Trilinear resampling under affine maps.
//!
//! Sampling is output driven: output voxel `p` reads the source at `A * p`
//! (both in centre-origin voxel coordinates). Corners outside the source grid
//! read a per-channel fill value.

use jers_tensor::ops::normalize_channels;
use jers_tensor::{Real, Tensor};

use crate::affine::{matrix_tensor, AffineMatrix};
use crate::error::{CoreError, Result};
use crate::volume::{LabelMask, Volume};

struct Corner {
    /// Flat voxel index, `None` when outside the grid.
    index: Option<usize>,
    weight: f64,
    /// Derivative of `weight` with respect to each sample coordinate.
    dweight: [f64; 3],
}

/// Geometry of one output voxel's sample.
struct Sample {
    /// Output position relative to the centre (homogeneous `p_3 = 1` implied).
    p: [f64; 3],
    corners: [Corner; 8],
}

fn centre(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|d| (d as f64 - 1.0) / 2.0)
}

fn sample_at(m: &[[f64; 4]; 3], dims: [usize; 3], c: [f64; 3], idx: [usize; 3]) -> Sample {
    let p = [
        idx[0] as f64 - c[0],
        idx[1] as f64 - c[1],
        idx[2] as f64 - c[2],
    ];
    let s: [f64; 3] =
        std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3] + c[r]);
    let base = s.map(f64::floor);
    let frac: [f64; 3] = std::array::from_fn(|a| s[a] - base[a]);
    let corners = std::array::from_fn(|k| {
        let off = [(k >> 2) & 1, (k >> 1) & 1, k & 1];
        let w1: [f64; 3] =
            std::array::from_fn(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] });
        let sign: [f64; 3] = std::array::from_fn(|a| if off[a] == 1 { 1.0 } else { -1.0 });
        let pos: [f64; 3] = std::array::from_fn(|a| base[a] + off[a] as f64);
        let inside = (0..3).all(|a| pos[a] >= 0.0 && pos[a] <= (dims[a] - 1) as f64);
        let index = inside
            .then(|| ((pos[0] as usize) * dims[1] + pos[1] as usize) * dims[2] + pos[2] as usize);
        Corner {
            index,
            weight: w1[0] * w1[1] * w1[2],
            dweight: [
                sign[0] * w1[1] * w1[2],
                sign[1] * w1[0] * w1[2],
                sign[2] * w1[0] * w1[1],
            ],
        }
    });
    Sample { p, corners }
}

fn top_rows<T: Real>(a: &Tensor<T>) -> Result<[[f64; 4]; 3]> {
    if a.shape() != [4, 4] {
        return Err(CoreError::Value(format!(
            "warp needs a 4x4 matrix, got {:?}",
            a.shape()
        )));
    }
    let d = a.to_f64_vec();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Value(
            "warp matrix has non-finite entries".into(),
        ));
    }
    Ok(std::array::from_fn(|r| {
        std::array::from_fn(|c| d[4 * r + c])
    }))
}

/// Differentiable warp of `src` (`[.., X, Y, Z]`, leading axes treated as
/// channels) by the `[4, 4]` matrix `a`.
///
/// `fill` holds one out-of-bounds value per channel, or a single value for all.
/// Gradients flow to both the source values and the matrix entries.
pub fn warp<T: Real>(src: &Tensor<T>, a: &Tensor<T>, fill: &[f64]) -> Result<Tensor<T>> {
    let shape = src.shape().to_vec();
    if shape.len() < 3 {
        return Err(CoreError::Value(format!(
            "warp needs at least 3 spatial axes, got {shape:?}"
        )));
    }
    let r = shape.len();
    let dims = [shape[r - 3], shape[r - 2], shape[r - 1]];
    let vox: usize = dims.iter().product();
    let channels = src.numel() / vox;
    if fill.len() != 1 && fill.len() != channels {
        return Err(CoreError::Value(format!(
            "{} fill values for {} channels",
            fill.len(),
            channels
        )));
    }
    let fill: Vec<T> = (0..channels)
        .map(|ch| T::of(fill[if fill.len() == 1 { 0 } else { ch }]))
        .collect();
    let m = top_rows(a)?;
    let c = centre(dims);

    let sd = src.data();
    let mut out = vec![T::zero(); src.numel()];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let o = (x * dims[1] + y) * dims[2] + z;
                let s = sample_at(&m, dims, c, [x, y, z]);
                for ch in 0..channels {
                    let mut acc = T::zero();
                    for k in &s.corners {
                        if k.weight == 0.0 {
                            continue;
                        }
                        let v = match k.index {
                            Some(i) => sd[ch * vox + i],
                            None => fill[ch],
                        };
                        acc += T::of(k.weight) * v;
                    }
                    out[ch * vox + o] = acc;
                }
            }
        }
    }

    let (src_c, a_c) = (src.clone(), a.clone());
    Ok(Tensor::from_op(
        "warp",
        shape,
        out,
        &[src, a],
        Box::new(move |g, _| {
            let sd = src_c.data();
            let want_src = src_c.requires_grad();
            let want_a = a_c.requires_grad();
            let mut gsrc = want_src.then(|| vec![T::zero(); sd.len()]);
            let mut ga = [[0.0f64; 4]; 3];
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    for z in 0..dims[2] {
                        let o = (x * dims[1] + y) * dims[2] + z;
                        let s = sample_at(&m, dims, c, [x, y, z]);
                        let mut dq = [0.0f64; 3];
                        for ch in 0..channels {
                            let gv = g[ch * vox + o];
                            if gv == T::zero() {
                                continue;
                            }
                            for k in &s.corners {
                                if let (Some(gs), Some(i)) = (gsrc.as_mut(), k.index) {
                                    gs[ch * vox + i] += gv * T::of(k.weight);
                                }
                                if want_a {
                                    let v = match k.index {
                                        Some(i) => sd[ch * vox + i],
                                        None => fill[ch],
                                    }
                                    .as_f64();
                                    let gv = gv.as_f64();
                                    for (d, dw) in dq.iter_mut().zip(k.dweight) {
                                        *d += gv * v * dw;
                                    }
                                }
                            }
                        }
                        if want_a {
                            for (row, d) in ga.iter_mut().zip(dq) {
                                row[0] += d * s.p[0];
                                row[1] += d * s.p[1];
                                row[2] += d * s.p[2];
                                row[3] += d;
                            }
                        }
                    }
                }
            }
            let gmat = want_a.then(|| {
                let mut v = vec![T::zero(); 16];
                for r in 0..3 {
                    for col in 0..4 {
                        v[4 * r + col] = T::of(ga[r][col]);
                    }
                }
                v
            });
            vec![gsrc, gmat]
        }),
    )?)
}

/// Resamples a volume: output voxel `p` takes the source value at `A * p`.
pub fn warp_volume(src: &Volume, a: &AffineMatrix) -> Result<Volume> {
    let out = warp(&src.data, &matrix_tensor::<f32>(a), &[0.0])?;
    Ok(Volume {
        data: out,
        spacing: src.spacing,
    })
}

/// Label warp with background absorbing out-of-bounds samples, then
/// renormalized so every voxel's memberships sum to one.
pub fn warp_labels_tensor<T: Real>(labels: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let channels = labels.shape()[0];
    let fill: Vec<f64> = (0..channels)
        .map(|c| if c == 0 { 1.0 } else { 0.0 })
        .collect();
    let warped = warp(labels, a, &fill)?;
    Ok(normalize_channels(&warped)?)
}

pub fn warp_labels(mask: &LabelMask, a_inv: &AffineMatrix) -> Result<LabelMask> {
    let out = warp_labels_tensor(&mask.data, &matrix_tensor::<f32>(a_inv))?;
    Ok(LabelMask {
        data: out,
        class_names: mask.class_names.clone(),
    })
}
