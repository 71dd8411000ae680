//! Per-voxel operations across the channel axis.
//!
//! Tensors are laid out `[.., C, X, Y, Z]`: the channel axis is the fourth
//! from the end and everything before it is treated as batch.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 4 {
        return Err(TensorError::dim(
            op,
            format!("need [.., C, X, Y, Z], got {shape:?}"),
        ));
    }
    let r = shape.len();
    Ok((
        shape[..r - 4].iter().product(),
        shape[r - 4],
        shape[r - 3..].iter().product(),
    ))
}

/// Max-shifted softmax across channels.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, c, inner) = channel_layout("softmax_channels", x.shape())?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        let base = o * c * inner;
        for v in 0..inner {
            let idx = |ch: usize| base + ch * inner + v;
            let m = (0..c)
                .map(|ch| src[idx(ch)])
                .fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for ch in 0..c {
                let e = (src[idx(ch)] - m).exp();
                out[idx(ch)] = e;
                s += e;
            }
            for ch in 0..c {
                out[idx(ch)] /= s;
            }
        }
    }
    Tensor::from_op(
        "softmax_channels",
        x.shape().to_vec(),
        out,
        &[x],
        Box::new(move |g, y| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                let base = o * c * inner;
                for v in 0..inner {
                    let idx = |ch: usize| base + ch * inner + v;
                    let dot: T = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                    for ch in 0..c {
                        gx[idx(ch)] = y[idx(ch)] * (g[idx(ch)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Divides every voxel's channel vector by its sum.
pub fn normalize_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, c, inner) = channel_layout("normalize_channels", x.shape())?;
    let src = x.data();
    let mut sums = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for ch in 0..c {
            let row = &src[(o * c + ch) * inner..][..inner];
            sums[o * inner..(o + 1) * inner]
                .iter_mut()
                .zip(row)
                .for_each(|(s, &v)| *s += v);
        }
    }
    let mut out = src.to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let row = &mut out[(o * c + ch) * inner..][..inner];
            row.iter_mut()
                .zip(&sums[o * inner..(o + 1) * inner])
                .for_each(|(v, &s)| *v /= s);
        }
    }
    Tensor::from_op(
        "normalize_channels",
        x.shape().to_vec(),
        out,
        &[x],
        Box::new(move |g, y| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for v in 0..inner {
                    let idx = |ch: usize| (o * c + ch) * inner + v;
                    let dot: T = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                    let s = sums[o * inner + v];
                    for ch in 0..c {
                        gx[idx(ch)] = (g[idx(ch)] - dot) / s;
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::ops::{mul, sum};

    #[test]
    fn uniform_and_dominant_cases() {
        let x = Tensor::<f32>::zeros(&[4, 2, 2, 2]).unwrap();
        let y = softmax_channels(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));

        let x = Tensor::<f32>::new(&[2, 1, 1, 1], vec![10.0, 0.0]).unwrap();
        let y = softmax_channels(&x).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-4 && y.data()[1] < 1e-4);

        let huge = Tensor::<f32>::new(&[2, 1, 1, 1], vec![1e30, 0.0]).unwrap();
        assert_eq!(softmax_channels(&huge).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn batched_layout_normalizes_per_sample() {
        let x = Tensor::<f64>::new(&[2, 3, 1, 1, 2], (0..12).map(|i| i as f64 * 0.3).collect())
            .unwrap();
        let y = softmax_channels(&x).unwrap();
        for n in 0..2 {
            for v in 0..2 {
                let s: f64 = (0..3).map(|c| y.data()[(n * 3 + c) * 2 + v]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_restores_unit_sums() {
        let x = Tensor::<f64>::new(&[2, 1, 1, 2], vec![0.2, 1.0, 0.6, 3.0]).unwrap();
        let y = normalize_channels(&x).unwrap();
        for (got, want) in y.data().iter().zip([0.25, 0.25, 0.75, 0.75]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_op_gradients() {
        let x = Tensor::<f64>::new(
            &[3, 2, 1, 2],
            (0..12).map(|i| ((i * 5 % 7) as f64) * 0.4 - 1.0).collect(),
        )
        .unwrap();
        let w =
            Tensor::<f64>::new(&[3, 2, 1, 2], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let report = check_gradients(
            |xs| {
                let s = softmax_channels(&xs[0])?;
                let n = normalize_channels(&crate::ops::add_scalar(&s, 0.3)?)?;
                sum(&mul(&n, &xs[1])?)
            },
            &[x, w],
            GradCheck::f64_default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
