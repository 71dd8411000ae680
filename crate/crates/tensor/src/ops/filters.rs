//! Spatial stencils over the last three axes.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    if shape.len() < 3 {
        return Err(TensorError::dim(
            op,
            format!("need at least 3 spatial axes, got {shape:?}"),
        ));
    }
    let r = shape.len();
    Ok((
        shape[..r - 3].iter().product(),
        [shape[r - 3], shape[r - 2], shape[r - 1]],
    ))
}

/// Windowed sum along one axis with zero padding; `stride` is the axis stride.
fn box_axis<T: Real>(src: &[T], dst: &mut [T], dims: [usize; 3], axis: usize, radius: usize) {
    let n = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let block = n * stride;
    for (sb, db) in src.chunks(block).zip(dst.chunks_mut(block)) {
        for lane in 0..stride {
            for i in 0..n {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(n - 1);
                let mut acc = T::zero();
                for j in lo..=hi {
                    acc += sb[j * stride + lane];
                }
                db[i * stride + lane] = acc;
            }
        }
    }
}

fn box_filter<T: Real>(data: &[T], outer: usize, dims: [usize; 3], window: usize) -> Vec<T> {
    let vol: usize = dims.iter().product();
    let radius = window / 2;
    let mut a = data.to_vec();
    let mut b = vec![T::zero(); data.len()];
    for axis in 0..3 {
        for o in 0..outer {
            box_axis(
                &a[o * vol..(o + 1) * vol],
                &mut b[o * vol..(o + 1) * vol],
                dims,
                axis,
                radius,
            );
        }
        std::mem::swap(&mut a, &mut b);
    }
    a
}

/// Sum over the centred `window^3` cube at every voxel, reading zero outside.
///
/// The zero-padded box filter is self-adjoint, so the backward pass applies
/// the same filter to the incoming gradient.
pub fn box_sum3d<T: Real>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (outer, dims) = spatial("box_sum3d", x.shape())?;
    if window % 2 == 0 {
        return Err(TensorError::dim(
            "box_sum3d",
            format!("window must be odd, got {window}"),
        ));
    }
    if dims.iter().any(|&d| window > d) {
        return Err(TensorError::dim(
            "box_sum3d",
            format!("window {window} exceeds volume {dims:?}"),
        ));
    }
    let data = box_filter(x.data(), outer, dims, window);
    Tensor::from_op(
        "box_sum3d",
        x.shape().to_vec(),
        data,
        &[x],
        Box::new(move |g, _| vec![Some(box_filter(g, outer, dims, window))]),
    )
}

/// Forward difference `x[i + 1] - x[i]` along spatial `axis` (0, 1 or 2);
/// the last slice is zero (replicate boundary).
pub fn forward_diff<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, dims) = spatial("forward_diff", x.shape())?;
    if axis > 2 {
        return Err(TensorError::dim(
            "forward_diff",
            format!("spatial axis {axis} out of range"),
        ));
    }
    let n = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let block = n * stride;
    let total = outer * dims.iter().product::<usize>();
    let src = x.data();
    let mut out = vec![T::zero(); total];
    for start in (0..total).step_by(block) {
        for i in 0..n - 1 {
            for lane in 0..stride {
                let p = start + i * stride + lane;
                out[p] = src[p + stride] - src[p];
            }
        }
    }
    Tensor::from_op(
        "forward_diff",
        x.shape().to_vec(),
        out,
        &[x],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); total];
            for start in (0..total).step_by(block) {
                for i in 0..n - 1 {
                    for lane in 0..stride {
                        let p = start + i * stride + lane;
                        gx[p] -= g[p];
                        gx[p + stride] += g[p];
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}
