use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Elementwise map whose derivative is expressed through `(x, y)`.
fn unary<T: Real>(
    op: &'static str,
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Tensor::from_op(
        op,
        x.shape().to_vec(),
        data,
        &[x],
        Box::new(move |g, y| {
            let gx = xc
                .data()
                .iter()
                .zip(y)
                .zip(g)
                .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                .collect();
            vec![Some(gx)]
        }),
    )
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        &[a, b],
        Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
    )
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x - y)
        .collect();
    Tensor::from_op(
        "sub",
        a.shape().to_vec(),
        data,
        &[a, b],
        Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
    )
}

/// Hadamard product.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        &[a, b],
        Box::new(move |g, _| {
            let ga = ac
                .requires_grad()
                .then(|| g.iter().zip(bc.data()).map(|(&g, &y)| g * y).collect());
            let gb = bc
                .requires_grad()
                .then(|| g.iter().zip(ac.data()).map(|(&g, &x)| g * x).collect());
            vec![ga, gb]
        }),
    )
}

pub fn div<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("div", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x / y)
        .collect();
    let bc = b.clone();
    Tensor::from_op(
        "div",
        a.shape().to_vec(),
        data,
        &[a, b],
        Box::new(move |g, out| {
            let ga = g.iter().zip(bc.data()).map(|(&g, &y)| g / y).collect();
            let gb = g
                .iter()
                .zip(bc.data())
                .zip(out)
                .map(|((&g, &y), &q)| -g * q / y)
                .collect();
            vec![Some(ga), Some(gb)]
        }),
    )
}

pub fn neg<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    scale(x, -1.0)
}

pub fn scale<T: Real>(x: &Tensor<T>, c: f64) -> Result<Tensor<T>> {
    let c = T::of(c);
    let data = x.data().iter().map(|&v| v * c).collect();
    Tensor::from_op(
        "scale",
        x.shape().to_vec(),
        data,
        &[x],
        Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * c).collect())]),
    )
}

pub fn add_scalar<T: Real>(x: &Tensor<T>, c: f64) -> Result<Tensor<T>> {
    let c = T::of(c);
    let data = x.data().iter().map(|&v| v + c).collect();
    Tensor::from_op(
        "add_scalar",
        x.shape().to_vec(),
        data,
        &[x],
        Box::new(|g, _| vec![Some(g.to_vec())]),
    )
}

pub fn square<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let two = T::of(2.0);
    unary("square", x, |v| v * v, move |v, _| two * v)
}

/// Natural logarithm; non-positive inputs raise a numeric fault.
pub fn log<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary("log", x, |v| v.ln(), |v, _| v.recip())
}

pub fn exp<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary("exp", x, |v| v.exp(), |_, y| y)
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, negative_slope: f64) -> Result<Tensor<T>> {
    let s = T::of(negative_slope);
    unary(
        "leaky_relu",
        x,
        move |v| if v > T::zero() { v } else { v * s },
        move |v, _| if v > T::zero() { T::one() } else { s },
    )
}

/// `1 / (1 + exp(-slope * x))`, the differentiable stand-in for a step function.
pub fn steep_sigmoid<T: Real>(x: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(TensorError::Value(format!(
            "sigmoid slope must be positive, got {slope}"
        )));
    }
    let k = T::of(slope);
    let data = x.data().iter().map(|&v| sigmoid(k * v)).collect();
    Tensor::from_op(
        "steep_sigmoid",
        x.shape().to_vec(),
        data,
        &[x],
        Box::new(move |g, y| {
            vec![Some(
                g.iter()
                    .zip(y)
                    .map(|(&g, &s)| g * k * s * (T::one() - s))
                    .collect(),
            )]
        }),
    )
}

/// Overflow-free logistic function.
fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Full reductions accumulate in `f64` whatever the element type.
fn total<T: Real>(x: &Tensor<T>) -> f64 {
    x.data().iter().map(|v| v.as_f64()).sum()
}

pub fn sum<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.numel();
    let s = T::of(total(x));
    Tensor::from_op(
        "sum",
        vec![1],
        vec![s],
        &[x],
        Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.numel();
    let inv = T::one() / T::of(n as f64);
    let s = T::of(total(x) / n as f64);
    Tensor::from_op(
        "mean",
        vec![1],
        vec![s],
        &[x],
        Box::new(move |g, _| vec![Some(vec![g[0] * inv; n])]),
    )
}

/// `x[n, c, ...] + bias[c]`.
pub fn add_channel_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 || bias.shape() != [shape[1]] {
        return Err(TensorError::dim(
            "add_channel_bias",
            format!("input {:?}, bias {:?}", shape, bias.shape()),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut data = x.to_vec();
    for b in 0..n {
        for ch in 0..c {
            let bv = bias.data()[ch];
            let off = (b * c + ch) * inner;
            data[off..off + inner].iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::from_op(
        "add_channel_bias",
        shape.to_vec(),
        data,
        &[x, bias],
        Box::new(move |g, _| {
            let mut gb = vec![T::zero(); c];
            for b in 0..n {
                for (ch, acc) in gb.iter_mut().enumerate() {
                    let off = (b * c + ch) * inner;
                    *acc += g[off..off + inner].iter().copied().sum();
                }
            }
            vec![Some(g.to_vec()), Some(gb)]
        }),
    )
}
