//! Mid-slice snapshots as binary PGM (grayscale) and PPM (colour overlay).

use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// Fixed x.
    Sagittal,
    /// Fixed y.
    Coronal,
    /// Fixed z.
    Axial,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Coronal, Plane::Axial];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
            Plane::Axial => "axial",
        }
    }
}

/// A 2-D slice, row-major with `width` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

/// Middle slice of an `[X, Y, Z]` (or one channel of `[C, X, Y, Z]`) array.
/// Rows run along the second remaining axis, flipped so it points up.
pub fn mid_slice<T: Copy>(values: &[T], dims: [usize; 3], plane: Plane) -> Slice<T> {
    let [nx, ny, nz] = dims;
    let at = |x: usize, y: usize, z: usize| values[(x * ny + y) * nz + z];
    let (w, h) = match plane {
        Plane::Sagittal => (ny, nz),
        Plane::Coronal => (nx, nz),
        Plane::Axial => (nx, ny),
    };
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        let v = h - 1 - r;
        for u in 0..w {
            data.push(match plane {
                Plane::Sagittal => at(nx / 2, u, v),
                Plane::Coronal => at(u, ny / 2, v),
                Plane::Axial => at(u, v, nz / 2),
            });
        }
    }
    Slice {
        width: w,
        height: h,
        data,
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, s: &Slice<f32>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(s.data.iter().map(|&v| to_byte(v)));
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn write_ppm(path: &Path, s: &Slice<[u8; 3]>) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    for px in &s.data {
        out.extend_from_slice(px);
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Grayscale slice with class `k > 0` tinted by palette colour `k - 1`.
pub fn overlay(gray: &Slice<f32>, classes: &Slice<usize>) -> Slice<[u8; 3]> {
    let data = gray
        .data
        .iter()
        .zip(&classes.data)
        .map(|(&g, &k)| {
            let b = to_byte(g);
            if k == 0 {
                [b, b, b]
            } else {
                let c = PALETTE[(k - 1) % PALETTE.len()];
                let mix = |a: u8, t: u8| ((a as u16 + t as u16) / 2) as u8;
                [mix(b, c[0]), mix(b, c[1]), mix(b, c[2])]
            }
        })
        .collect();
    Slice {
        width: gray.width,
        height: gray.height,
        data,
    }
}
