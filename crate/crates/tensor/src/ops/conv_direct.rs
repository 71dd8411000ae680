//! Direct kernels for stride-1 "same" convolutions.
//!
//! The input is zero padded once and every kernel tap becomes a constant
//! offset into the flattened padded volume. Outputs are computed over the
//! contiguous padded index range that covers all real voxels (positions on
//! the padding ring are computed and discarded), which keeps the inner loops
//! free of boundary checks. This avoids materialising an im2col matrix, which
//! dominates the cost when channel counts are small.

use crate::real::{gemm, MatRef, Real};

/// Output lanes per register block.
const LANES: usize = 16;
/// Output channels per register block.
const CO_BLOCK: usize = 4;
/// Positions per cache block in the dot-product kernel-gradient reduction.
const RED_BLOCK: usize = 512;
/// Below this `cin * cout` the per-tap GEMMs are too thin to pay off.
const GEMM_MIN_CHANNEL_PRODUCT: usize = 64;

#[derive(Clone, Debug)]
pub(crate) struct PaddedGrid {
    pub dims: [usize; 3],
    pub pad: usize,
    pub padded: [usize; 3],
    /// Per-channel stride in the padded buffer (padded volume plus slack).
    pub chan_stride: usize,
    /// First and one-past-last computed padded index.
    pub q0: usize,
    pub q1: usize,
    /// Flat offset of every tap, in `(dx, dy, dz)` row-major order.
    pub offsets: Vec<isize>,
}

impl PaddedGrid {
    pub fn new(dims: [usize; 3], k: usize) -> Self {
        let pad = k / 2;
        let padded = [dims[0] + 2 * pad, dims[1] + 2 * pad, dims[2] + 2 * pad];
        let (sx, sy) = (padded[1] * padded[2], padded[2]);
        let q0 = pad * sx + pad * sy + pad;
        let q_last = (dims[0] - 1 + pad) * sx + (dims[1] - 1 + pad) * sy + (dims[2] - 1 + pad);
        let len = q_last + 1 - q0;
        let q1 = q0 + len.div_ceil(LANES) * LANES;
        let mut offsets = Vec::with_capacity(k * k * k);
        for dx in 0..k {
            for dy in 0..k {
                for dz in 0..k {
                    let o = (dx as isize - pad as isize) * sx as isize
                        + (dy as isize - pad as isize) * sy as isize
                        + (dz as isize - pad as isize);
                    offsets.push(o);
                }
            }
        }
        let padded_len: usize = padded.iter().product();
        // Rounding q1 up may read up to LANES past the padded volume.
        let chan_stride = padded_len + LANES;
        Self {
            dims,
            pad,
            padded,
            chan_stride,
            q0,
            q1,
            offsets,
        }
    }

    pub fn span(&self) -> usize {
        self.q1 - self.q0
    }

    /// Copies `channels` dense volumes into a zero-padded buffer.
    pub fn pad_channels<T: Real>(&self, src: &[T], channels: usize) -> Vec<T> {
        let [nx, ny, nz] = self.dims;
        let [_, py, pz] = self.padded;
        let p = self.pad;
        let mut out = vec![T::zero(); channels * self.chan_stride];
        for c in 0..channels {
            let s = &src[c * nx * ny * nz..(c + 1) * nx * ny * nz];
            let d = &mut out[c * self.chan_stride..(c + 1) * self.chan_stride];
            for x in 0..nx {
                for y in 0..ny {
                    let from = (x * ny + y) * nz;
                    let to = ((x + p) * py + (y + p)) * pz + p;
                    d[to..to + nz].copy_from_slice(&s[from..from + nz]);
                }
            }
        }
        out
    }

    /// Extracts real voxels from a `[channels, span]` buffer indexed from `q0`,
    /// adding them into `dst` (`[channels, X, Y, Z]`).
    pub fn gather_add<T: Real>(&self, span_buf: &[T], channels: usize, dst: &mut [T]) {
        let [nx, ny, nz] = self.dims;
        let [_, py, pz] = self.padded;
        let p = self.pad;
        let span = self.span();
        for c in 0..channels {
            let s = &span_buf[c * span..(c + 1) * span];
            let d = &mut dst[c * nx * ny * nz..(c + 1) * nx * ny * nz];
            for x in 0..nx {
                for y in 0..ny {
                    let from = ((x + p) * py + (y + p)) * pz + p - self.q0;
                    let to = (x * ny + y) * nz;
                    d[to..to + nz]
                        .iter_mut()
                        .zip(&s[from..from + nz])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
}

/// `out[co, q] = sum_{ci, tap} w[co, ci, tap] * input[ci, q + off(tap)]` for
/// `q` in the grid's computed range. `wt` is laid out `[ci * taps + tap][co]`.
/// Returns a `[cout, span]` buffer.
pub(crate) fn correlate<T: Real>(
    grid: &PaddedGrid,
    input_pad: &[T],
    cin: usize,
    wt: &[T],
    cout: usize,
) -> Vec<T> {
    let span = grid.span();
    let taps = grid.offsets.len();
    let mut out = vec![T::zero(); cout * span];
    // Absolute start index of each (ci, tap) source row, relative to q0.
    let bases: Vec<usize> = (0..cin)
        .flat_map(|ci| {
            grid.offsets
                .iter()
                .map(move |&o| (ci * grid.chan_stride) as isize + grid.q0 as isize + o)
        })
        .map(|b| b as usize)
        .collect();
    debug_assert_eq!(bases.len(), cin * taps);

    let mut co = 0;
    while co + CO_BLOCK <= cout {
        correlate_block::<T, CO_BLOCK>(input_pad, &bases, wt, cout, co, span, &mut out);
        co += CO_BLOCK;
    }
    while co < cout {
        correlate_block::<T, 1>(input_pad, &bases, wt, cout, co, span, &mut out);
        co += 1;
    }
    out
}

#[inline(always)]
fn correlate_block<T: Real, const CB: usize>(
    input: &[T],
    bases: &[usize],
    wt: &[T],
    cout: usize,
    co: usize,
    span: usize,
    out: &mut [T],
) {
    for qb in (0..span).step_by(LANES) {
        let mut acc = [[T::zero(); LANES]; CB];
        for (k, &base) in bases.iter().enumerate() {
            let src: &[T; LANES] = input[base + qb..base + qb + LANES]
                .try_into()
                .expect("lane block");
            let w: &[T; CB] = wt[k * cout + co..k * cout + co + CB]
                .try_into()
                .expect("weight block");
            for j in 0..CB {
                let wj = w[j];
                for l in 0..LANES {
                    acc[j][l] += wj * src[l];
                }
            }
        }
        for (j, a) in acc.iter().enumerate() {
            out[(co + j) * span + qb..(co + j) * span + qb + LANES].copy_from_slice(a);
        }
    }
}

/// `gw[co][ci * taps + tap] += sum_q gout[co, q] * input[ci, q + off(tap)]`,
/// where `gout_pad` is the zero-padded output gradient (same layout as
/// [`PaddedGrid::pad_channels`]). One GEMM per tap over the whole span.
pub(crate) fn kernel_gradient<T: Real>(
    grid: &PaddedGrid,
    input_pad: &[T],
    cin: usize,
    gout_pad: &[T],
    cout: usize,
    gw: &mut [T],
) {
    if cin * cout < GEMM_MIN_CHANNEL_PRODUCT {
        return kernel_gradient_dot(grid, input_pad, cin, gout_pad, cout, gw);
    }
    let span = grid.span();
    let taps = grid.offsets.len();
    let kdim = cin * taps;
    let cs = grid.chan_stride;
    let gout = MatRef::new(&gout_pad[grid.q0..], cout, span).with_ld(cs);
    let mut tap_grad = vec![T::zero(); cout * cin];
    for (tap, &off) in grid.offsets.iter().enumerate() {
        let start = (grid.q0 as isize + off) as usize;
        let shifted = MatRef::t(&input_pad[start..], cin, span).with_ld(cs);
        gemm(T::one(), gout, shifted, T::zero(), &mut tap_grad, cin);
        for co in 0..cout {
            for ci in 0..cin {
                gw[co * kdim + ci * taps + tap] += tap_grad[co * cin + ci];
            }
        }
    }
}

fn kernel_gradient_dot<T: Real>(
    grid: &PaddedGrid,
    input_pad: &[T],
    cin: usize,
    gout_pad: &[T],
    cout: usize,
    gw: &mut [T],
) {
    let span = grid.span();
    let kdim = cin * grid.offsets.len();
    let bases: Vec<usize> = (0..cin)
        .flat_map(|ci| {
            grid.offsets
                .iter()
                .map(move |&o| (ci * grid.chan_stride) as isize + grid.q0 as isize + o)
        })
        .map(|b| b as usize)
        .collect();
    for qb in (0..span).step_by(RED_BLOCK) {
        let len = RED_BLOCK.min(span - qb);
        for (k, &base) in bases.iter().enumerate() {
            let src = &input_pad[base + qb..base + qb + len];
            let mut co = 0;
            while co + CO_BLOCK <= cout {
                let sums = dot_block::<T, CO_BLOCK>(
                    src,
                    gout_pad,
                    grid.chan_stride,
                    co,
                    grid.q0 + qb,
                    len,
                );
                for (j, s) in sums.iter().enumerate() {
                    gw[(co + j) * kdim + k] += *s;
                }
                co += CO_BLOCK;
            }
            while co < cout {
                let sums =
                    dot_block::<T, 1>(src, gout_pad, grid.chan_stride, co, grid.q0 + qb, len);
                gw[co * kdim + k] += sums[0];
                co += 1;
            }
        }
    }
}

#[inline(always)]
fn dot_block<T: Real, const CB: usize>(
    src: &[T],
    gout: &[T],
    stride: usize,
    co: usize,
    start: usize,
    len: usize,
) -> [T; CB] {
    const V: usize = 8;
    let mut acc = [[T::zero(); V]; CB];
    let full = len / V * V;
    let rows: [&[T]; CB] =
        std::array::from_fn(|j| &gout[(co + j) * stride + start..(co + j) * stride + start + len]);
    for l0 in (0..full).step_by(V) {
        let s: &[T; V] = src[l0..l0 + V].try_into().expect("block");
        for j in 0..CB {
            let g: &[T; V] = rows[j][l0..l0 + V].try_into().expect("block");
            for l in 0..V {
                acc[j][l] += g[l] * s[l];
            }
        }
    }
    let mut out = [T::zero(); CB];
    for j in 0..CB {
        let mut t = acc[j].iter().copied().sum::<T>();
        for l in full..len {
            t += rows[j][l] * src[l];
        }
        out[j] = t;
    }
    out
}
