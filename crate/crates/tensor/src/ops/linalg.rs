use crate::error::{Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// `a[M, K] x b[K, N]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(TensorError::dim("matmul", format!("{sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::new(a.data(), m, k),
        MatRef::new(b.data(), k, n),
        T::zero(),
        &mut out,
        n,
    );
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        "matmul",
        vec![m, n],
        out,
        &[a, b],
        Box::new(move |g, _| {
            let ga = ac.requires_grad().then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(
                    T::one(),
                    MatRef::new(g, m, n),
                    MatRef::t(bc.data(), k, n),
                    T::zero(),
                    &mut ga,
                    k,
                );
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(
                    T::one(),
                    MatRef::t(ac.data(), m, k),
                    MatRef::new(g, m, n),
                    T::zero(),
                    &mut gb,
                    n,
                );
                gb
            });
            vec![ga, gb]
        }),
    )
}

/// Fully connected layer: `x[N, F] * weight[G, F]^T + bias[G]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (sx, sw) = (x.shape(), weight.shape());
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || bias.shape() != [sw[0]] {
        return Err(TensorError::dim(
            "linear",
            format!("x {sx:?}, weight {sw:?}, bias {:?}", bias.shape()),
        ));
    }
    let (n, f, g_out) = (sx[0], sx[1], sw[0]);
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        T::one(),
        MatRef::new(x.data(), n, f),
        MatRef::t(weight.data(), g_out, f),
        T::one(),
        &mut out,
        g_out,
    );
    let (xc, wc, bc) = (x.clone(), weight.clone(), bias.clone());
    Tensor::from_op(
        "linear",
        vec![n, g_out],
        out,
        &[x, weight, bias],
        Box::new(move |g, _| {
            let gx = xc.requires_grad().then(|| {
                let mut gx = vec![T::zero(); n * f];
                gemm(
                    T::one(),
                    MatRef::new(g, n, g_out),
                    MatRef::new(wc.data(), g_out, f),
                    T::zero(),
                    &mut gx,
                    f,
                );
                gx
            });
            let gw = wc.requires_grad().then(|| {
                let mut gw = vec![T::zero(); g_out * f];
                gemm(
                    T::one(),
                    MatRef::t(g, n, g_out),
                    MatRef::new(xc.data(), n, f),
                    T::zero(),
                    &mut gw,
                    f,
                );
                gw
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![T::zero(); g_out];
                for row in g.chunks(g_out) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                gb
            });
            vec![gx, gw, gb]
        }),
    )
}
