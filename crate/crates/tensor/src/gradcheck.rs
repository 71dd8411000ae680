//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function (under
//! [`no_grad`]), so it stays independent of every backward rule it checks.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::real::Real;
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference half step.
    pub step: f64,
    /// Bound on the max-norm relative error per input.
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Gradients whose max-norm is below this are compared in absolute terms.
    pub abs_floor: f64,
}

impl GradCheck {
    pub fn f64_default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-6,
            max_coords: None,
            seed: 0,
            abs_floor: 1e-9,
        }
    }

    pub fn f32_default() -> Self {
        Self {
            step: 5e-3,
            tolerance: 1e-3,
            max_coords: None,
            seed: 0,
            abs_floor: 1e-5,
        }
    }

    pub fn sampled(mut self, coords: usize, seed: u64) -> Self {
        self.max_coords = Some(coords);
        self.seed = seed;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    pub max_abs_error: f64,
    /// Largest gradient magnitude seen on either side.
    pub scale: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    pub abs_floor: f64,
    /// Largest analytic gradient magnitude over every checked coordinate.
    pub gradient_scale: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.inputs
            .iter()
            .all(|r| r.relative_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.relative_error)
            .fold(0.0, f64::max)
    }

    /// Max-norm relative error of the whole gradient, all inputs taken as
    /// one vector. Inputs with tiny gradients are then judged against the
    /// scale of the function rather than their own.
    pub fn global_relative(&self) -> f64 {
        let err = self
            .inputs
            .iter()
            .map(|r| r.max_abs_error)
            .fold(0.0, f64::max);
        let scale = self
            .inputs
            .iter()
            .map(|r| r.scale)
            .fold(self.gradient_scale, f64::max);
        err / scale.max(self.abs_floor)
    }

    pub fn passed_global(&self) -> bool {
        self.global_relative() <= self.tolerance
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check (tolerance {:e}, global rel {:.3e}):",
            self.tolerance,
            self.global_relative()
        )?;
        for r in &self.inputs {
            writeln!(
                f,
                "  input {}: {} coords, max |err| {:.3e}, scale {:.3e}, rel {:.3e}",
                r.input, r.checked, r.max_abs_error, r.scale, r.relative_error
            )?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences, treating every input as a variable.
pub fn check_gradients<T, F>(f: F, inputs: &[Tensor<T>], cfg: GradCheck) -> Result<GradReport>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let params: Vec<Tensor<T>> = inputs.iter().map(|t| t.detach_param()).collect();
    let root = f(&params)?;
    root.backward()?;
    let analytic: Vec<Vec<T>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.clone())
                .unwrap_or_else(|| vec![T::zero(); p.numel()])
        })
        .collect();

    let base: Vec<Tensor<T>> = inputs.iter().map(|t| t.detach()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut gradient_scale: f64 = 0.0;
    for (i, input) in base.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for &c in &coords {
            // Returns (f, perturbed coordinate value) so rounding of the step is accounted for.
            let eval = |delta: f64| -> Result<(f64, f64)> {
                let mut data = input.to_vec();
                data[c] += T::of(delta);
                let x = data[c].as_f64();
                let mut args = base.clone();
                args[i] = Tensor::new(input.shape(), data)?;
                no_grad(|| f(&args)).map(|r| (r.item().as_f64(), x))
            };
            let (fp, xp) = eval(cfg.step)?;
            let (fm, xm) = eval(-cfg.step)?;
            let numeric = (fp - fm) / (xp - xm);
            let a = analytic[i][c].as_f64();
            max_err = max_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            gradient_scale = gradient_scale.max(a.abs());
        }
        let relative_error = if scale < cfg.abs_floor {
            max_err / cfg.abs_floor
        } else {
            max_err / scale
        };
        reports.push(InputReport {
            input: i,
            checked: coords.len(),
            max_abs_error: max_err,
            scale,
            relative_error,
        });
    }
    Ok(GradReport {
        inputs: reports,
        tolerance: cfg.tolerance,
        abs_floor: cfg.abs_floor,
        gradient_scale,
    })
}
