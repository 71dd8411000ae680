//! 12-parameter affine maps in homogeneous form.
//!
//! Points are voxel coordinates measured from the volume centre, so a rotation
//! or scale turns the volume about its middle. The plain `f64` types below are
//! used for bookkeeping and data generation; [`params_matrix`] and
//! [`inverse_matrix`] are the differentiable counterparts used in training.

use jers_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Guard on `|det|` of the linear part below which inversion is refused.
pub const SINGULAR_DET: f64 = 1e-8;

/// Row-major entries of the top three rows of an affine matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams(pub [f64; 12]);

impl AffineParams {
    pub const IDENTITY: AffineParams =
        AffineParams([1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn new(a: [f64; 12]) -> Result<Self> {
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Value(format!(
                "affine parameter a{} is {}",
                i + 1,
                a[i]
            )));
        }
        Ok(Self(a))
    }

    /// `identity + delta`, the form predicted by the registration network.
    pub fn from_delta(delta: [f64; 12]) -> Result<Self> {
        let mut a = Self::IDENTITY.0;
        a.iter_mut().zip(delta).for_each(|(x, d)| *x += d);
        Self::new(a)
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Homogeneous 4x4 affine matrix with bottom row `(0, 0, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix([[f64; 4]; 4]);

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix = AffineMatrix([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);

    /// Builds a matrix from its top three rows.
    pub fn from_top_rows(rows: [[f64; 4]; 3]) -> Self {
        Self([rows[0], rows[1], rows[2], [0.0, 0.0, 0.0, 1.0]])
    }

    /// Accepts 16 row-major values; the bottom row must be exactly `(0, 0, 0, 1)`.
    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(CoreError::Value(format!(
                "affine matrix needs 16 values, got {}",
                v.len()
            )));
        }
        if v[12..] != [0.0, 0.0, 0.0, 1.0] {
            return Err(CoreError::Value(format!(
                "affine bottom row must be (0,0,0,1), got {:?}",
                &v[12..]
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Value(
                "affine matrix has non-finite entries".into(),
            ));
        }
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[4 * r..4 * r + 4]);
        }
        Ok(Self(m))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            out[4 * r..4 * r + 4].copy_from_slice(&self.0[r]);
        }
        out
    }

    pub fn rows(&self) -> &[[f64; 4]; 4] {
        &self.0
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[r][c]
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::from_top_rows([
            [1.0, 0.0, 0.0, t[0]],
            [0.0, 1.0, 0.0, t[1]],
            [0.0, 0.0, 1.0, t[2]],
        ])
    }

    pub fn scaling(s: [f64; 3]) -> Self {
        Self::from_top_rows([
            [s[0], 0.0, 0.0, 0.0],
            [0.0, s[1], 0.0, 0.0],
            [0.0, 0.0, s[2], 0.0],
        ])
    }

    /// Rotation by the given angles (degrees) about x, then y, then z.
    pub fn rotation_deg(angles: [f64; 3]) -> Self {
        let [ax, ay, az] = angles.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = Self::from_top_rows([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, cx, -sx, 0.0],
            [0.0, sx, cx, 0.0],
        ]);
        let ry = Self::from_top_rows([
            [cy, 0.0, sy, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [-sy, 0.0, cy, 0.0],
        ]);
        let rz = Self::from_top_rows([
            [cz, -sz, 0.0, 0.0],
            [sz, cz, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]);
        compose(&rz, &compose(&ry, &rx))
    }

    /// Determinant of the linear 3x3 block.
    pub fn det3(&self) -> f64 {
        det3(&self.0)
    }

    pub fn to_params(&self) -> AffineParams {
        let mut a = [0.0; 12];
        for r in 0..3 {
            a[4 * r..4 * r + 4].copy_from_slice(&self.0[r]);
        }
        AffineParams(a)
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &AffineMatrix) -> f64 {
        self.to_row_major()
            .iter()
            .zip(other.to_row_major())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for AffineMatrix {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Serialize for AffineMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        AffineMatrix::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

fn det3<
    T: Copy + std::ops::Mul<Output = T> + std::ops::Sub<Output = T> + std::ops::Add<Output = T>,
>(
    m: &[[T; 4]; 4],
) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn params_to_matrix(a: &AffineParams) -> Result<AffineMatrix> {
    let a = AffineParams::new(a.0)?;
    Ok(AffineMatrix::from_top_rows([
        [a.0[0], a.0[1], a.0[2], a.0[3]],
        [a.0[4], a.0[5], a.0[6], a.0[7]],
        [a.0[8], a.0[9], a.0[10], a.0[11]],
    ]))
}

/// `incremental * accumulated`: apply `accumulated` first, then `incremental`.
pub fn compose(incremental: &AffineMatrix, accumulated: &AffineMatrix) -> AffineMatrix {
    let (a, b) = (&incremental.0, &accumulated.0);
    let mut m = [[0.0; 4]; 4];
    for r in 0..3 {
        for c in 0..4 {
            m[r][c] = (0..4).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    m[3] = [0.0, 0.0, 0.0, 1.0];
    AffineMatrix(m)
}

/// Closed-form inverse: adjugate of the linear block plus back-substituted translation.
pub fn invert(a: &AffineMatrix) -> Result<AffineMatrix> {
    Ok(AffineMatrix(invert_rows(&a.0)?))
}

fn invert_rows<T: Real>(m: &[[T; 4]; 4]) -> Result<[[T; 4]; 4]> {
    let det = det3(m);
    if !(det.as_f64().abs() > SINGULAR_DET) {
        return Err(CoreError::Singular { det: det.as_f64() });
    }
    let inv_det = T::one() / det;
    let cof =
        |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let l = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let mut out = [[T::zero(); 4]; 4];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = l[r][c] * inv_det;
        }
    }
    for r in 0..3 {
        let mut t = T::zero();
        for k in 0..3 {
            t += out[r][k] * m[k][3];
        }
        out[r][3] = -t;
    }
    out[3][3] = T::one();
    Ok(out)
}

pub fn apply_point(a: &AffineMatrix, p: [f64; 3]) -> [f64; 3] {
    let m = &a.0;
    std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3])
}

/// Differentiable `[12] -> [4, 4]` embedding of parameters into a matrix.
pub fn params_matrix<T: Real>(params: &Tensor<T>) -> Result<Tensor<T>> {
    if params.numel() != 12 {
        return Err(CoreError::Value(format!(
            "affine parameters need 12 values, got shape {:?}",
            params.shape()
        )));
    }
    let mut data = params.to_vec();
    data.extend_from_slice(&[T::zero(), T::zero(), T::zero(), T::one()]);
    Ok(Tensor::from_op(
        "params_matrix",
        vec![4, 4],
        data,
        &[params],
        Box::new(|g, _| vec![Some(g[..12].to_vec())]),
    )?)
}

/// Differentiable inverse of an affine `[4, 4]` tensor.
///
/// The backward rule is `dA = -A^-T G A^-T`; entries of the bottom row receive
/// gradients too but are constant in every caller.
pub fn inverse_matrix<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != [4, 4] {
        return Err(CoreError::Value(format!(
            "inverse_matrix needs a 4x4 tensor, got {:?}",
            a.shape()
        )));
    }
    let d = a.data();
    let m: [[T; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|c| d[4 * r + c]));
    let inv = invert_rows(&m)?;
    let data: Vec<T> = inv.iter().flatten().copied().collect();
    Ok(Tensor::from_op(
        "inverse_matrix",
        vec![4, 4],
        data,
        &[a],
        Box::new(move |g, out| {
            // gA = -(B^T G B^T) with B = A^-1 = out.
            let mut tmp = [T::zero(); 16];
            for r in 0..4 {
                for c in 0..4 {
                    let mut s = T::zero();
                    for k in 0..4 {
                        s += out[4 * k + r] * g[4 * k + c];
                    }
                    tmp[4 * r + c] = s;
                }
            }
            let mut ga = vec![T::zero(); 16];
            for r in 0..4 {
                for c in 0..4 {
                    let mut s = T::zero();
                    for k in 0..4 {
                        s += tmp[4 * r + k] * out[4 * c + k];
                    }
                    ga[4 * r + c] = -s;
                }
            }
            vec![Some(ga)]
        }),
    )?)
}

/// Reads a `[4, 4]` tensor back into an [`AffineMatrix`].
pub fn matrix_of<T: Real>(t: &Tensor<T>) -> Result<AffineMatrix> {
    AffineMatrix::from_row_major(&t.to_f64_vec())
}

pub fn matrix_tensor<T: Real>(a: &AffineMatrix) -> Tensor<T> {
    Tensor::from_f64(&[4, 4], &a.to_row_major()).expect("finite 4x4")
}

#[cfg(test)]
mod tests {
    use super::*;
    use jers_tensor::gradcheck::{check_gradients, GradCheck};
    use jers_tensor::ops;

    #[test]
    fn identity_params_give_identity() {
        assert_eq!(
            params_to_matrix(&AffineParams::IDENTITY).unwrap(),
            AffineMatrix::IDENTITY
        );
        let mut a = AffineParams::IDENTITY.0;
        a[3] = 2.0;
        let m = params_to_matrix(&AffineParams(a)).unwrap();
        assert_eq!(m, AffineMatrix::translation([2.0, 0.0, 0.0]));
        let s = params_to_matrix(&AffineParams([
            2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0,
        ]))
        .unwrap();
        assert_eq!(apply_point(&s, [1.0, 1.0, 1.0]), [2.0, 2.0, 2.0]);
        assert!(params_to_matrix(&AffineParams([f64::NAN; 12])).is_err());
    }

    #[test]
    fn translations_add_under_composition() {
        let c = compose(
            &AffineMatrix::translation([1.0, 0.0, 0.0]),
            &AffineMatrix::translation([0.0, 2.0, 0.0]),
        );
        assert_eq!(c, AffineMatrix::translation([1.0, 2.0, 0.0]));
        assert_eq!(
            invert(&AffineMatrix::translation([1.0, -2.0, 3.0])).unwrap(),
            AffineMatrix::translation([-1.0, 2.0, -3.0])
        );
        assert_eq!(
            invert(&AffineMatrix::IDENTITY).unwrap(),
            AffineMatrix::IDENTITY
        );
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = AffineMatrix::scaling([1.0, 1e-5, 1e-5]);
        match invert(&m) {
            Err(CoreError::Singular { det }) => assert!((det - 1e-10).abs() < 1e-20),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn bottom_row_is_validated() {
        let mut v = AffineMatrix::IDENTITY.to_row_major();
        v[12] = 0.5;
        assert!(AffineMatrix::from_row_major(&v).is_err());
        let m = AffineMatrix::rotation_deg([10.0, -5.0, 3.0]);
        let json = serde_json::to_string(&m).unwrap();
        let back: AffineMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn tensor_inverse_matches_closed_form() {
        let m = compose(
            &AffineMatrix::rotation_deg([12.0, -7.0, 30.0]),
            &AffineMatrix::translation([1.5, -0.5, 2.0]),
        );
        let t = matrix_tensor::<f64>(&m);
        let inv = matrix_of(&inverse_matrix(&t).unwrap()).unwrap();
        assert!(inv.max_abs_diff(&invert(&m).unwrap()) < 1e-14);
    }

    #[test]
    fn affine_op_gradients() {
        let p = Tensor::<f64>::from_f64(
            &[12],
            &[
                1.1, 0.2, -0.1, 0.5, 0.05, 0.9, 0.1, -1.0, -0.2, 0.1, 1.2, 0.3,
            ],
        )
        .unwrap();
        let q = Tensor::<f64>::from_f64(
            &[12],
            &[0.9, -0.1, 0.0, 1.5, 0.1, 1.0, 0.2, 0.0, 0.0, 0.3, 1.1, -0.7],
        )
        .unwrap();
        let w = Tensor::<f64>::from_f64(
            &[4, 4],
            &(0..16).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>(),
        )
        .unwrap();
        let report = check_gradients(
            |xs| {
                let a = params_matrix(&xs[0]).map_err(tensor_err)?;
                let b = params_matrix(&xs[1]).map_err(tensor_err)?;
                let c = ops::matmul(&a, &b)?;
                let inv = inverse_matrix(&c).map_err(tensor_err)?;
                ops::sum(&ops::mul(&inv, &xs[2])?)
            },
            &[p, q, w],
            GradCheck::f64_default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    fn tensor_err(e: CoreError) -> jers_tensor::TensorError {
        jers_tensor::TensorError::Value(e.to_string())
    }
}
