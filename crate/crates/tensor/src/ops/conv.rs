//! 3D convolution (cross-correlation) via chunked im2col + GEMM.

use super::conv_direct::{self, PaddedGrid};
use crate::error::{Result, TensorError};
use crate::parallel;
use crate::real::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// Upper bound on the number of elements in one im2col buffer.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the im2col matrix (`cin * k^3`).
    fn taps(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Output positions handled per chunk: whole `(x, y)` rows of `z`.
    fn chunk_len(&self) -> usize {
        let row = self.output[2];
        let rows_total = self.output[0] * self.output[1];
        let rows = (COLS_BUDGET / (self.taps() * row).max(1)).clamp(1, rows_total);
        rows * row
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let step = self.chunk_len();
        let total = self.out_vol();
        (0..total)
            .step_by(step)
            .map(|s| (s, (s + step).min(total)))
            .collect()
    }
}

fn output_extent(op: &'static str, x: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if x + 2 * pad < k {
        return Err(TensorError::dim(
            op,
            format!("extent {x} with padding {pad} is smaller than kernel {k}"),
        ));
    }
    Ok((x + 2 * pad - k) / stride + 1)
}

/// Fills `cols` (`taps x len`, row-major) for output positions `[p0, p1)`.
fn im2col<T: Real>(g: &Geometry, x: &[T], p0: usize, p1: usize, cols: &mut [T]) {
    let len = p1 - p0;
    let [nx, ny, nz] = g.input;
    let [_, oy_n, oz_n] = g.output;
    let (k, s, pad) = (g.k as isize, g.stride as isize, g.pad as isize);
    let in_vol = g.in_vol();
    let row_starts: Vec<(isize, isize)> = (p0..p1)
        .step_by(oz_n)
        .map(|p| {
            let r = p / oz_n;
            ((r / oy_n) as isize * s - pad, (r % oy_n) as isize * s - pad)
        })
        .collect();
    let mut r = 0;
    for c in 0..g.cin {
        let xc = &x[c * in_vol..(c + 1) * in_vol];
        for dx in 0..k {
            for dy in 0..k {
                for dz in 0..k {
                    let dst = &mut cols[r * len..(r + 1) * len];
                    for (row, &(bx, by)) in row_starts.iter().enumerate() {
                        let drow = &mut dst[row * oz_n..(row + 1) * oz_n];
                        let (ix, iy) = (bx + dx, by + dy);
                        if ix < 0 || iy < 0 || ix >= nx as isize || iy >= ny as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let line = &xc[(ix as usize * ny + iy as usize) * nz..][..nz];
                        for (oz, d) in drow.iter_mut().enumerate() {
                            let iz = oz as isize * s - pad + dz;
                            *d = if iz >= 0 && iz < nz as isize {
                                line[iz as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto the input gradient.
fn col2im<T: Real>(g: &Geometry, cols: &[T], p0: usize, p1: usize, gx: &mut [T]) {
    let len = p1 - p0;
    let [nx, ny, nz] = g.input;
    let [_, oy_n, oz_n] = g.output;
    let (k, s, pad) = (g.k as isize, g.stride as isize, g.pad as isize);
    let in_vol = g.in_vol();
    let mut r = 0;
    for c in 0..g.cin {
        let gc = &mut gx[c * in_vol..(c + 1) * in_vol];
        for dx in 0..k {
            for dy in 0..k {
                for dz in 0..k {
                    let src = &cols[r * len..(r + 1) * len];
                    for (row, p) in (p0..p1).step_by(oz_n).enumerate() {
                        let rr = p / oz_n;
                        let ix = (rr / oy_n) as isize * s - pad + dx;
                        let iy = (rr % oy_n) as isize * s - pad + dy;
                        if ix < 0 || iy < 0 || ix >= nx as isize || iy >= ny as isize {
                            continue;
                        }
                        let line = &mut gc[(ix as usize * ny + iy as usize) * nz..][..nz];
                        for (oz, &v) in src[row * oz_n..(row + 1) * oz_n].iter().enumerate() {
                            let iz = oz as isize * s - pad + dz;
                            if iz >= 0 && iz < nz as isize {
                                line[iz as usize] += v;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Cross-correlation of `input[N, Cin, X, Y, Z]` with `kernel[Cout, Cin, k, k, k]`.
///
/// Output extent per axis is `(X + 2 * padding - k) / stride + 1`.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv3d";
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 5 || ks.len() != 5 {
        return Err(TensorError::dim(
            OP,
            format!("need rank-5 input and kernel, got {is:?} and {ks:?}"),
        ));
    }
    let k = ks[2];
    if ks[3] != k || ks[4] != k || k % 2 == 0 {
        return Err(TensorError::dim(
            OP,
            format!("kernel must be an odd cube, got {ks:?}"),
        ));
    }
    if is[1] != ks[1] {
        return Err(TensorError::dim(
            OP,
            format!("input has {} channels, kernel expects {}", is[1], ks[1]),
        ));
    }
    if stride == 0 {
        return Err(TensorError::dim(OP, "stride must be positive"));
    }
    let input_ext = [is[2], is[3], is[4]];
    let mut output = [0; 3];
    for (o, &x) in output.iter_mut().zip(&input_ext) {
        *o = output_extent(OP, x, k, stride, padding)?;
    }
    let g = Geometry {
        cin: is[1],
        cout: ks[0],
        k,
        stride,
        pad: padding,
        input: input_ext,
        output,
    };
    let batch = is[0];
    if stride == 1 && padding == k / 2 {
        return conv3d_same(input, kernel, g, batch);
    }
    let (in_vol, out_vol, taps) = (g.in_vol(), g.out_vol(), g.taps());
    let chunks = g.chunks();

    let kdata = kernel.data();
    let mut out = vec![T::zero(); batch * g.cout * out_vol];
    for n in 0..batch {
        let xn = &input.data()[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        let parts = parallel::map_indexed(chunks.len(), |ci| {
            let (p0, p1) = chunks[ci];
            let len = p1 - p0;
            let mut cols = vec![T::zero(); taps * len];
            im2col(&g, xn, p0, p1, &mut cols);
            let mut part = vec![T::zero(); g.cout * len];
            gemm(
                T::one(),
                MatRef::new(kdata, g.cout, taps),
                MatRef::new(&cols, taps, len),
                T::zero(),
                &mut part,
                len,
            );
            part
        });
        let on = &mut out[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        for (&(p0, p1), part) in chunks.iter().zip(parts) {
            let len = p1 - p0;
            for co in 0..g.cout {
                on[co * out_vol + p0..co * out_vol + p1]
                    .copy_from_slice(&part[co * len..(co + 1) * len]);
            }
        }
    }

    let (xc, kc) = (input.clone(), kernel.clone());
    let shape = vec![batch, g.cout, output[0], output[1], output[2]];
    Tensor::from_op(
        OP,
        shape,
        out,
        &[input, kernel],
        Box::new(move |grad, _| {
            let mut gk = kc.requires_grad().then(|| vec![T::zero(); g.cout * taps]);
            let mut gx = xc
                .requires_grad()
                .then(|| vec![T::zero(); batch * g.cin * in_vol]);
            let mut cols = Vec::new();
            for n in 0..batch {
                let xn = &xc.data()[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
                let gn = &grad[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
                for &(p0, p1) in &chunks {
                    let len = p1 - p0;
                    cols.resize(taps * len, T::zero());
                    let gout = MatRef::new(&gn[p0..], g.cout, len).with_ld(out_vol);
                    if let Some(gk) = gk.as_mut() {
                        im2col(&g, xn, p0, p1, &mut cols);
                        gemm(
                            T::one(),
                            gout,
                            MatRef::t(&cols, taps, len),
                            T::one(),
                            gk,
                            taps,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            T::one(),
                            MatRef::t(kc.data(), g.cout, taps),
                            gout,
                            T::zero(),
                            &mut cols,
                            len,
                        );
                        col2im(
                            &g,
                            &cols,
                            p0,
                            p1,
                            &mut gx[n * g.cin * in_vol..(n + 1) * g.cin * in_vol],
                        );
                    }
                }
            }
            vec![gx, gk]
        }),
    )
}

/// Stride-1 convolution with `padding = k / 2` on the direct kernels.
fn conv3d_same<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: Geometry,
    batch: usize,
) -> Result<Tensor<T>> {
    let grid = PaddedGrid::new(g.input, g.k);
    let (cin, cout) = (g.cin, g.cout);
    let taps = g.k * g.k * g.k;
    let vol = g.in_vol();
    let kdim = cin * taps;
    // [ci * taps + tap][co]
    let mut wt = vec![T::zero(); kdim * cout];
    for co in 0..cout {
        for kk in 0..kdim {
            wt[kk * cout + co] = kernel.data()[co * kdim + kk];
        }
    }
    let mut out = vec![T::zero(); batch * cout * vol];
    for n in 0..batch {
        let padded = grid.pad_channels(&input.data()[n * cin * vol..(n + 1) * cin * vol], cin);
        let span = conv_direct::correlate(&grid, &padded, cin, &wt, cout);
        grid.gather_add(&span, cout, &mut out[n * cout * vol..(n + 1) * cout * vol]);
    }

    let (xc, kc) = (input.clone(), kernel.clone());
    let mut shape = vec![batch, cout];
    shape.extend_from_slice(&g.input);
    Tensor::from_op(
        "conv3d",
        shape,
        out,
        &[input, kernel],
        Box::new(move |grad, _| {
            let mut gk = kc.requires_grad().then(|| vec![T::zero(); cout * kdim]);
            let mut gx = xc
                .requires_grad()
                .then(|| vec![T::zero(); batch * cin * vol]);
            // Adjoint weights: [co * taps + tap][ci] = w[co][ci][taps - 1 - tap].
            let wt_adj = gx.as_ref().map(|_| {
                let mut w = vec![T::zero(); cout * taps * cin];
                for co in 0..cout {
                    for ci in 0..cin {
                        for t in 0..taps {
                            w[(co * taps + t) * cin + ci] =
                                kc.data()[co * kdim + ci * taps + (taps - 1 - t)];
                        }
                    }
                }
                w
            });
            for n in 0..batch {
                let gout = grid.pad_channels(&grad[n * cout * vol..(n + 1) * cout * vol], cout);
                if let Some(gk) = gk.as_mut() {
                    let padded =
                        grid.pad_channels(&xc.data()[n * cin * vol..(n + 1) * cin * vol], cin);
                    conv_direct::kernel_gradient(&grid, &padded, cin, &gout, cout, gk);
                }
                if let (Some(gx), Some(w)) = (gx.as_mut(), wt_adj.as_ref()) {
                    let span = conv_direct::correlate(&grid, &gout, cout, w, cin);
                    grid.gather_add(&span, cin, &mut gx[n * cin * vol..(n + 1) * cin * vol]);
                }
            }
            vec![gx, gk]
        }),
    )
}
