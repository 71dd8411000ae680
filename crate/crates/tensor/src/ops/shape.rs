use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn reshape<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != x.numel() {
        return Err(TensorError::dim(
            "reshape",
            format!("{:?} -> {:?}", x.shape(), shape),
        ));
    }
    Tensor::from_op(
        "reshape",
        shape.to_vec(),
        x.to_vec(),
        &[x],
        Box::new(|g, _| vec![Some(g.to_vec())]),
    )
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::dim(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    for x in xs {
        let ok = x.rank() == rank
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(TensorError::dim(
                "concat",
                format!("{:?} vs {:?} on axis {axis}", x.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = xs.iter().map(|x| x.shape()[axis] * inner).collect();
    let row: usize = widths.iter().sum();

    let mut data = Vec::with_capacity(outer * row);
    for o in 0..outer {
        for (x, &w) in xs.iter().zip(&widths) {
            data.extend_from_slice(&x.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    let inputs: Vec<&Tensor<T>> = xs.to_vec();
    Tensor::from_op(
        "concat",
        shape,
        data,
        &inputs,
        Box::new(move |g, _| {
            let mut grads: Vec<Vec<T>> = widths
                .iter()
                .map(|&w| Vec::with_capacity(outer * w))
                .collect();
            for o in 0..outer {
                let mut off = o * row;
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    gi.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    )
}

fn spatial_split(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
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

/// Nearest-neighbour x2 upsampling of the last three axes.
pub fn upsample_nearest2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, [a, b, c]) = spatial_split("upsample_nearest2", x.shape())?;
    let (oa, ob, oc) = (2 * a, 2 * b, 2 * c);
    let vin = a * b * c;
    let vout = oa * ob * oc;
    let mut data = vec![T::zero(); outer * vout];
    for o in 0..outer {
        let src = &x.data()[o * vin..(o + 1) * vin];
        let dst = &mut data[o * vout..(o + 1) * vout];
        for i in 0..oa {
            for j in 0..ob {
                let srow = &src[((i / 2) * b + j / 2) * c..][..c];
                let drow = &mut dst[(i * ob + j) * oc..][..oc];
                for (k, d) in drow.iter_mut().enumerate() {
                    *d = srow[k / 2];
                }
            }
        }
    }
    let r = x.rank();
    let mut shape = x.shape().to_vec();
    shape[r - 3] = oa;
    shape[r - 2] = ob;
    shape[r - 1] = oc;
    Tensor::from_op(
        "upsample_nearest2",
        shape,
        data,
        &[x],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); outer * vin];
            for o in 0..outer {
                let gsrc = &g[o * vout..(o + 1) * vout];
                let gdst = &mut gx[o * vin..(o + 1) * vin];
                for i in 0..oa {
                    for j in 0..ob {
                        let grow = &gsrc[(i * ob + j) * oc..][..oc];
                        let drow = &mut gdst[((i / 2) * b + j / 2) * c..][..c];
                        for (k, &v) in grow.iter().enumerate() {
                            drow[k / 2] += v;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Mean over the last three axes: `[.., X, Y, Z] -> [..]` (at least rank 1 is kept).
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, [a, b, c]) = spatial_split("global_avg_pool", x.shape())?;
    let v = a * b * c;
    let inv = T::one() / T::of(v as f64);
    let data: Vec<T> = x
        .data()
        .chunks(v)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    let mut shape = x.shape()[..x.rank() - 3].to_vec();
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::from_op(
        "global_avg_pool",
        shape,
        data,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Vec::with_capacity(outer * v);
            for &gv in g.iter().take(outer) {
                gx.extend(std::iter::repeat(gv * inv).take(v));
            }
            vec![Some(gx)]
        }),
    )
}
