//! Dense tensors with reverse-mode automatic differentiation, sized for small
//! volumetric networks on a CPU.
//!
//! ```
//! use jers_tensor::{ops, Tensor};
//!
//! let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
//! let loss = ops::sum(&ops::mul(&x, &x).unwrap()).unwrap();
//! loss.backward().unwrap();
//! assert_eq!(&*x.grad().unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod parallel;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use real::{gemm, MatRef, Real};
pub use tensor::{grad_enabled, no_grad, BackwardFn, TapeNode, Tensor};

impl<T: Real> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        ops::reshape(self, shape)
    }
}
