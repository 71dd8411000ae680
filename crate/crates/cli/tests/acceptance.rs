//! Acceptance suite. Every test prints one `PASS`/`FAIL` line to stdout
//! (bypassing the harness capture) and fails when its criterion does.
//! Tests hold a shared lock so timings are not distorted by each other.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use jers_cli::commands::{
    cmd_ablate, cmd_train, GridRow, LogRecord, BEST_CKPT, LAST_CKPT, RUN_MANIFEST, TRAIN_LOG,
};
use jers_cli::RunConfig;
use jers_core::affine::{
    apply_point, compose, inverse_matrix, invert, matrix_of, params_matrix, AffineMatrix,
};
use jers_core::dataset::SplitSizes;
use jers_core::losses::{cross_entropy_seg, local_ncc_loss, mask_smoothness, LossWeights};
use jers_core::metrics::{dice, mutual_information, MI_BINS};
use jers_core::networks::{ArchConfig, Parameters};
use jers_core::phantom::{generate_phantom, make_atlas, AugmentationRanges, PhantomSpec};
use jers_core::pipeline::{forward, infer, Atlas, JersModel, Stages, Variant};
use jers_core::resample::{warp, warp_labels_tensor, warp_volume};
use jers_core::volume::Volume;
use jers_core::CoreError;
use jers_tensor::gradcheck::{check_gradients, GradCheck};
use jers_tensor::ops::{
    add, add_channel_bias, add_scalar, box_sum3d, concat, conv3d, div, exp, forward_diff,
    global_avg_pool, leaky_relu, linear, log, matmul, mean, mul, neg, normalize_channels, reshape,
    scale, softmax_channels, square, steep_sigmoid, sub, sum, upsample_nearest2,
};
use jers_tensor::{Real, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Training budget of the end-to-end, ablation and stage-sweep runs.
const TRAIN_STEPS: usize = 600;
const TRAIN_LR: f64 = 1e-3;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "[{verdict}] {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn tensor<T: Real>(shape: &[usize], data: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape, data).unwrap()
}

fn as_tensor_error(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

// ---------------------------------------------------------------------------
// Gradient correctness

type OpFn<T> = Box<dyn Fn(&[Tensor<T>]) -> jers_tensor::Result<Tensor<T>>>;

struct OpCase<T: Real> {
    name: &'static str,
    f: OpFn<T>,
    inputs: Vec<Tensor<T>>,
    /// Finite-difference step for f32 when the default does not suit the op's scale.
    f32_step: Option<f64>,
}

/// Reduces `y` to a scalar with fixed random weights so every output entry matters.
fn probe<T: Real>(y: &Tensor<T>, seed: u64) -> jers_tensor::Result<Tensor<T>> {
    let w = tensor::<T>(y.shape(), &uniform(&mut rng(seed), y.numel(), -1.0, 1.0));
    sum(&mul(y, &w)?)
}

/// Near-identity affine parameters whose samples on grids up to 6^3 keep
/// fractional parts within 0.2..0.5, clear of the trilinear kinks at integers.
fn near_identity_params(r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..4 {
            let v = if col == 3 {
                0.35 + r.gen_range(-0.02..0.02)
            } else if col == row {
                1.0 + r.gen_range(-0.02..0.02)
            } else {
                r.gen_range(-0.02..0.02)
            };
            p.push(v);
        }
    }
    p
}

fn op_cases<T: Real>() -> Vec<OpCase<T>> {
    let mut r = rng(2024);
    let mut u = |shape: &[usize], lo: f64, hi: f64| -> Tensor<T> {
        let n = shape.iter().product();
        tensor(shape, &uniform(&mut r, n, lo, hi))
    };
    let signed_away_from_zero: Vec<f64> = {
        let mut r = rng(7);
        (0..27)
            .map(|_| r.gen_range(0.2..2.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect()
    };
    let matrix = || {
        let mut p = near_identity_params(&mut rng(11));
        p.extend([0.0, 0.0, 0.0, 1.0]);
        tensor::<T>(&[4, 4], &p)
    };
    let params = || tensor::<T>(&[12], &near_identity_params(&mut rng(12)));

    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {
            OpCase {
                name: $name,
                f: Box::new($f),
                inputs: $inputs,
                f32_step: None,
            }
        };
        ($name:expr, $inputs:expr, $f:expr, $step:expr) => {
            OpCase {
                name: $name,
                f: Box::new($f),
                inputs: $inputs,
                f32_step: Some($step),
            }
        };
    }

    vec![
        case!(
            "add",
            vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 3, 4], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&add(&x[0], &x[1])?, 1)
        ),
        case!(
            "sub",
            vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 3, 4], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&sub(&x[0], &x[1])?, 2)
        ),
        case!(
            "mul",
            vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 3, 4], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&mul(&x[0], &x[1])?, 3)
        ),
        case!(
            "div",
            vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 3, 4], 0.5, 2.0)],
            |x: &[Tensor<T>]| probe(&div(&x[0], &x[1])?, 4)
        ),
        case!("neg", vec![u(&[10], -1.0, 1.0)], |x: &[Tensor<T>]| probe(
            &neg(&x[0])?,
            5
        )),
        case!("scale", vec![u(&[10], -1.0, 1.0)], |x: &[Tensor<T>]| probe(
            &scale(&x[0], -2.5)?,
            6
        )),
        case!("add_scalar", vec![u(&[10], -1.0, 1.0)], |x: &[Tensor<
            T,
        >]| probe(
            &add_scalar(&x[0], 0.7)?,
            7
        )),
        case!(
            "square",
            vec![u(&[10], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&square(&x[0])?, 8)
        ),
        case!("exp", vec![u(&[10], -1.0, 1.0)], |x: &[Tensor<T>]| probe(
            &exp(&x[0])?,
            9
        )),
        case!("log", vec![u(&[10], 0.5, 2.0)], |x: &[Tensor<T>]| probe(
            &log(&x[0])?,
            10
        )),
        case!(
            "leaky_relu",
            vec![tensor(&[27], &signed_away_from_zero)],
            |x: &[Tensor<T>]| probe(&leaky_relu(&x[0], 0.2)?, 11)
        ),
        case!(
            "steep_sigmoid",
            vec![u(&[27], -0.06, 0.06)],
            |x: &[Tensor<T>]| probe(&steep_sigmoid(&x[0], 50.0)?, 12),
            1e-4
        ),
        case!("sum", vec![u(&[2, 3, 4], -1.0, 1.0)], |x: &[Tensor<
            T,
        >]| probe(
            &sum(&square(&x[0])?)?,
            13
        )),
        case!("mean", vec![u(&[2, 3, 4], -1.0, 1.0)], |x: &[Tensor<
            T,
        >]| probe(
            &mean(&square(&x[0])?)?,
            14
        )),
        case!(
            "add_channel_bias",
            vec![u(&[1, 3, 2, 2, 2], -1.0, 1.0), u(&[3], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&add_channel_bias(&x[0], &x[1])?, 15)
        ),
        case!(
            "softmax_channels",
            vec![u(&[1, 3, 3, 3, 3], -2.0, 2.0)],
            |x: &[Tensor<T>]| probe(&softmax_channels(&x[0])?, 16)
        ),
        case!(
            "normalize_channels",
            vec![u(&[3, 3, 3, 3], 0.2, 1.5)],
            |x: &[Tensor<T>]| probe(&normalize_channels(&x[0])?, 17)
        ),
        case!(
            "conv3d stride 1",
            vec![
                u(&[1, 2, 5, 5, 5], -1.0, 1.0),
                u(&[3, 2, 3, 3, 3], -0.5, 0.5)
            ],
            |x: &[Tensor<T>]| probe(&conv3d(&x[0], &x[1], 1, 1)?, 18)
        ),
        case!(
            "conv3d stride 2",
            vec![
                u(&[2, 2, 6, 6, 6], -1.0, 1.0),
                u(&[2, 2, 3, 3, 3], -0.5, 0.5)
            ],
            |x: &[Tensor<T>]| probe(&conv3d(&x[0], &x[1], 2, 1)?, 19)
        ),
        case!(
            "box_sum3d",
            vec![u(&[4, 5, 6], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&box_sum3d(&x[0], 3)?, 20)
        ),
        case!(
            "forward_diff",
            vec![u(&[3, 4, 5], -1.0, 1.0)],
            |x: &[Tensor<T>]| {
                let d = add(
                    &add(
                        &forward_diff(&x[0], 0)?,
                        &scale(&forward_diff(&x[0], 1)?, 2.0)?,
                    )?,
                    &scale(&forward_diff(&x[0], 2)?, -3.0)?,
                )?;
                probe(&d, 21)
            }
        ),
        case!(
            "matmul",
            vec![u(&[3, 4], -1.0, 1.0), u(&[4, 2], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&matmul(&x[0], &x[1])?, 22)
        ),
        case!(
            "linear",
            vec![
                u(&[2, 4], -1.0, 1.0),
                u(&[3, 4], -1.0, 1.0),
                u(&[3], -1.0, 1.0)
            ],
            |x: &[Tensor<T>]| probe(&linear(&x[0], &x[1], &x[2])?, 23)
        ),
        case!(
            "reshape",
            vec![u(&[2, 3, 4], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&square(&reshape(&x[0], &[4, 6])?)?, 24)
        ),
        case!(
            "concat",
            vec![
                u(&[1, 2, 2, 2, 2], -1.0, 1.0),
                u(&[1, 1, 2, 2, 2], -1.0, 1.0)
            ],
            |x: &[Tensor<T>]| probe(&square(&concat(&[&x[0], &x[1]], 1)?)?, 25)
        ),
        case!(
            "global_avg_pool",
            vec![u(&[1, 3, 3, 3, 3], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&global_avg_pool(&x[0])?, 26)
        ),
        case!(
            "upsample_nearest2",
            vec![u(&[1, 2, 2, 2, 2], -1.0, 1.0)],
            |x: &[Tensor<T>]| probe(&upsample_nearest2(&x[0])?, 27)
        ),
        case!(
            "warp",
            vec![u(&[2, 5, 5, 5], 0.0, 1.0), matrix()],
            |x: &[Tensor<T>]| probe(&warp(&x[0], &x[1], &[0.0]).map_err(as_tensor_error)?, 28)
        ),
        case!(
            "warp_labels_tensor",
            vec![u(&[3, 4, 4, 4], 0.1, 1.0), params()],
            |x: &[Tensor<T>]| {
                let a = params_matrix(&x[1]).map_err(as_tensor_error)?;
                probe(
                    &warp_labels_tensor(&normalize_channels(&x[0])?, &a)
                        .map_err(as_tensor_error)?,
                    29,
                )
            }
        ),
        case!("params_matrix", vec![params()], |x: &[Tensor<T>]| probe(
            &params_matrix(&x[0]).map_err(as_tensor_error)?,
            30
        )),
        case!("inverse_matrix", vec![params()], |x: &[Tensor<T>]| {
            let a = params_matrix(&x[0]).map_err(as_tensor_error)?;
            probe(&inverse_matrix(&a).map_err(as_tensor_error)?, 31)
        }),
        case!(
            "local_ncc_loss",
            vec![u(&[1, 1, 5, 5, 5], 0.0, 1.0), u(&[1, 1, 5, 5, 5], 0.0, 1.0)],
            |x: &[Tensor<T>]| local_ncc_loss(&x[0], &x[1], 3).map_err(as_tensor_error)
        ),
        case!(
            "cross_entropy_seg",
            vec![
                u(&[1, 3, 3, 3, 3], -2.0, 2.0),
                u(&[1, 3, 3, 3, 3], 0.0, 1.0)
            ],
            |x: &[Tensor<T>]| {
                cross_entropy_seg(&softmax_channels(&x[0])?, &x[1]).map_err(as_tensor_error)
            }
        ),
        case!(
            "mask_smoothness",
            vec![u(&[4, 4, 4], 0.0, 1.0)],
            |x: &[Tensor<T>]| mask_smoothness(&x[0]).map_err(as_tensor_error)
        ),
    ]
}

fn pipeline_model<T: Real>() -> (JersModel<T>, Tensor<T>) {
    let spec = PhantomSpec::with_classes(2).scaled_to([8, 8, 8]);
    let (img, labels) = make_atlas(&spec).unwrap();
    let atlas = Atlas::new(&img, &labels).unwrap();
    let stages = Stages {
        extraction: 2,
        registration: 2,
    };
    let mut m = JersModel::new(ArchConfig::tiny(2), stages, atlas, 3).unwrap();
    m.nets.randomize(0.1, 31).unwrap();
    let s = generate_phantom(&spec, 11)
        .unwrap()
        .image
        .batched()
        .unwrap();
    (m, s)
}

fn pipeline_loss<T: Real>(
    m: &JersModel<T>,
    s: &Tensor<T>,
    params: &[Tensor<T>],
) -> jers_tensor::Result<Tensor<T>> {
    let mut mm = m.clone();
    for ((_, p), x) in mm.nets.params_mut().into_iter().zip(params) {
        *p = x.clone();
    }
    let art = forward(&mm, s, true).map_err(as_tensor_error)?;
    let terms = jers_core::losses::total_loss(&art, &mm.atlas.image, &LossWeights::default())
        .map_err(as_tensor_error)?;
    Ok(terms.total)
}

fn params_of<T: Real>(m: &JersModel<T>) -> Vec<Tensor<T>> {
    m.nets
        .params()
        .into_iter()
        .map(|(_, p)| p.clone())
        .collect()
}

#[test]
fn gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst64: f64 = 0.0;
    let mut worst32: f64 = 0.0;

    for c in op_cases::<f64>() {
        let rep = check_gradients(&c.f, &c.inputs, GradCheck::f64_default()).unwrap();
        worst64 = worst64.max(rep.worst());
        if !rep.passed() {
            failures.push(format!("{} f64 {:.2e}", c.name, rep.worst()));
        }
    }
    for c in op_cases::<f32>() {
        let mut cfg = GradCheck::f32_default();
        if let Some(h) = c.f32_step {
            cfg = cfg.with_step(h);
        }
        let rep = check_gradients(&c.f, &c.inputs, cfg).unwrap();
        worst32 = worst32.max(rep.worst());
        if !rep.passed() {
            failures.push(format!("{} f32 {:.2e}", c.name, rep.worst()));
        }
    }

    // Whole pipeline, M = N = 2, C = 2, 8^3.
    let (m64, s64) = pipeline_model::<f64>();
    let rep = check_gradients(
        |xs| pipeline_loss(&m64, &s64, xs),
        &params_of(&m64),
        GradCheck::f64_default().sampled(4, 1),
    )
    .unwrap();
    let pipe64 = rep.global_relative();
    if !rep.passed_global() {
        failures.push(format!("pipeline f64 {pipe64:.2e}"));
    }

    // The f32 pipeline gradient against central differences of the same
    // parameters evaluated in f64.
    let (m32, s32) = pipeline_model::<f32>();
    let (r64, rs64): (JersModel<f64>, Tensor<f64>) = (m32.cast(), s32.cast());
    let reference = check_gradients(
        |xs| pipeline_loss(&r64, &rs64, xs),
        &params_of(&r64),
        GradCheck::f64_default().sampled(4, 2),
    )
    .unwrap();
    if !reference.passed_global() {
        failures.push(format!(
            "pipeline f64 reference {:.2e}",
            reference.global_relative()
        ));
    }
    let xs: Vec<Tensor<f32>> = params_of(&m32).iter().map(|p| p.detach_param()).collect();
    pipeline_loss(&m32, &s32, &xs).unwrap().backward().unwrap();
    let x64: Vec<Tensor<f64>> = params_of(&r64).iter().map(|p| p.detach_param()).collect();
    pipeline_loss(&r64, &rs64, &x64)
        .unwrap()
        .backward()
        .unwrap();
    let (mut err, mut scale_) = (0.0f64, 0.0f64);
    for (a, b) in xs.iter().zip(&x64) {
        for (u, v) in a.grad().unwrap().iter().zip(b.grad().unwrap().iter()) {
            err = err.max((*u as f64 - v).abs());
            scale_ = scale_.max(v.abs());
        }
    }
    let pipe32 = err / scale_;
    if pipe32 > 1e-3 {
        failures.push(format!("pipeline f32 {pipe32:.2e}"));
    }

    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        failures.push(format!("runtime {secs:.1}s"));
    }
    let ok = failures.is_empty();
    report(
        "gradient correctness",
        ok,
        &format!(
            "ops f64 worst {worst64:.2e}, ops f32 worst {worst32:.2e}, pipeline f64 {pipe64:.2e}, \
             pipeline f32 {pipe32:.2e}, {secs:.1}s{}",
            if ok {
                String::new()
            } else {
                format!("; failed: {}", failures.join(", "))
            }
        ),
    );
    assert!(ok, "{failures:?}");
}

// ---------------------------------------------------------------------------
// Resampler exactness

fn gaussian_blur(v: &[f32], dims: [usize; 3], sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let mut cur: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let idx = [x, y, z];
                    let at = x * strides[0] + y * strides[1] + z;
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let p = idx[axis] as isize + k as isize - radius;
                        if p >= 0 && (p as usize) < dims[axis] {
                            let off =
                                (p as usize as isize - idx[axis] as isize) * strides[axis] as isize;
                            acc += w * cur[(at as isize + off) as usize];
                        }
                    }
                    next[at] = acc / norm;
                }
            }
        }
        cur = next;
    }
    cur.into_iter().map(|x| x as f32).collect()
}

#[test]
fn resampler_exactness() {
    let _g = serial();
    let mut failures = Vec::new();

    // Identity warps reproduce the input bit for bit.
    let mut r = rng(5);
    let mut identity_cases = 0;
    for _ in 0..20 {
        let dims = [r.gen_range(2..9), r.gen_range(2..9), r.gen_range(2..9)];
        let n = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| r.gen_range(-2.0..2.0f32)).collect();
        let v = Volume::new(dims, data).unwrap();
        let w = warp_volume(&v, &AffineMatrix::IDENTITY).unwrap();
        if w.values() != v.values() {
            failures.push(format!("identity on {dims:?}"));
        }
        identity_cases += 1;
    }
    let phantom = generate_phantom(&PhantomSpec::default(), 3).unwrap().image;
    if warp_volume(&phantom, &AffineMatrix::IDENTITY)
        .unwrap()
        .values()
        != phantom.values()
    {
        failures.push("identity on a phantom".into());
    }

    // Half-voxel shifts of a linear ramp are exact away from the upper border.
    let dims = [9, 10, 11];
    let ramp = |x: usize, y: usize, z: usize| (2 * x + 3 * y + z) as f32;
    let mut data = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                data.push(ramp(x, y, z));
            }
        }
    }
    let v = Volume::new(dims, data).unwrap();
    let shifts: [[f64; 3]; 4] = [
        [0.5, 0.0, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, 0.0, 0.5],
        [0.5, 0.5, 0.5],
    ];
    let mut interior = 0;
    for t in shifts {
        let w = warp_volume(&v, &AffineMatrix::translation(t)).unwrap();
        for x in 0..dims[0] - 1 {
            for y in 0..dims[1] - 1 {
                for z in 0..dims[2] - 1 {
                    let got = w.values()[(x * dims[1] + y) * dims[2] + z];
                    let expect = ramp(x, y, z) as f64 + 2.0 * t[0] + 3.0 * t[1] + t[2];
                    interior += 1;
                    if got as f64 != expect {
                        failures.push(format!(
                            "ramp shift {t:?} at {:?}: {got} vs {expect}",
                            [x, y, z]
                        ));
                    }
                }
            }
        }
    }

    // Warp then inverse-warp on smooth 32^3 volumes. Content pushed out of
    // the grid by the first warp cannot come back, so the error is taken over
    // voxels whose intermediate sample stays inside; the whole-volume figure
    // is reported alongside.
    let spec = PhantomSpec::default();
    let mut r = rng(77);
    let (mut worst, mut total, mut worst_all) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..50 {
        let p = generate_phantom(&spec, 500 + k).unwrap().image;
        let d = p.dims();
        let smooth = Volume::new(d, gaussian_blur(p.values(), d, 1.0)).unwrap();
        let a = AugmentationRanges::LPBA.sample(&mut r);
        let a_inv = invert(&a).unwrap();
        let there = warp_volume(&smooth, &a).unwrap();
        let back = warp_volume(&there, &a_inv).unwrap();
        let c = d.map(|n| (n as f64 - 1.0) / 2.0);
        let (mut err, mut err_all, mut inside) = (0.0f64, 0.0f64, 0usize);
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    let i = (x * d[1] + y) * d[2] + z;
                    let e = (back.values()[i] - smooth.values()[i]).abs() as f64;
                    err_all += e;
                    let q =
                        apply_point(&a_inv, [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]]);
                    if (0..3).all(|ax| q[ax] + c[ax] >= 0.0 && q[ax] + c[ax] <= (d[ax] - 1) as f64)
                    {
                        err += e;
                        inside += 1;
                    }
                }
            }
        }
        let mae = err / inside as f64;
        worst = worst.max(mae);
        total += mae;
        worst_all = worst_all.max(err_all / smooth.len() as f64);
    }
    if worst > 0.02 {
        failures.push(format!("round trip worst MAE {worst:.4}"));
    }

    let ok = failures.is_empty();
    report(
        "resampler exactness",
        ok,
        &format!(
            "identity {identity_cases}+1 volumes, ramp {interior} interior voxels, \
             round trip over 50 LPBA transforms: mean MAE {:.4}, worst {worst:.4} \
             (whole volume incl. content leaving the grid: worst {worst_all:.4}){}",
            total / 50.0,
            if ok {
                String::new()
            } else {
                format!(
                    "; failed: {}",
                    failures
                        .iter()
                        .take(5)
                        .cloned()
                        .collect::<Vec<_>>()
                        .join(", ")
                )
            }
        ),
    );
    assert!(ok, "{failures:?}");
}

// ---------------------------------------------------------------------------
// Oracle equivalence

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn conv_oracle(
    x: &[f64],
    [n, cin, dx, dy, dz]: [usize; 5],
    k: &[f64],
    [cout, ks]: [usize; 2],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 3]) {
    let o = [dx, dy, dz].map(|d| (d + 2 * pad - ks) / stride + 1);
    let mut out = vec![0.0; n * cout * o[0] * o[1] * o[2]];
    for b in 0..n {
        for co in 0..cout {
            for i in 0..o[0] {
                for j in 0..o[1] {
                    for l in 0..o[2] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for a in 0..ks {
                                for bb in 0..ks {
                                    for c in 0..ks {
                                        let p = (i * stride + a) as isize - pad as isize;
                                        let q = (j * stride + bb) as isize - pad as isize;
                                        let s = (l * stride + c) as isize - pad as isize;
                                        if p < 0 || q < 0 || s < 0 {
                                            continue;
                                        }
                                        let (p, q, s) = (p as usize, q as usize, s as usize);
                                        if p >= dx || q >= dy || s >= dz {
                                            continue;
                                        }
                                        let xi = (((b * cin + ci) * dx + p) * dy + q) * dz + s;
                                        let ki = (((co * cin + ci) * ks + a) * ks + bb) * ks + c;
                                        acc += x[xi] * k[ki];
                                    }
                                }
                            }
                        }
                        out[(((b * cout + co) * o[0] + i) * o[1] + j) * o[2] + l] = acc;
                    }
                }
            }
        }
    }
    (out, o)
}

fn ncc_oracle(w: &[f64], t: &[f64], d: [usize; 3], win: usize) -> f64 {
    let h = (win / 2) as isize;
    let n = (win * win * win) as f64;
    let at = |v: &[f64], x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= d[0] as isize || y >= d[1] as isize || z >= d[2] as isize
        {
            0.0
        } else {
            v[(x as usize * d[1] + y as usize) * d[2] + z as usize]
        }
    };
    let mut total = 0.0;
    for x in 0..d[0] as isize {
        for y in 0..d[1] as isize {
            for z in 0..d[2] as isize {
                let (mut si, mut sj, mut sii, mut sjj, mut sij) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in -h..=h {
                    for b in -h..=h {
                        for c in -h..=h {
                            let i = at(w, x + a, y + b, z + c);
                            let j = at(t, x + a, y + b, z + c);
                            si += i;
                            sj += j;
                            sii += i * i;
                            sjj += j * j;
                            sij += i * j;
                        }
                    }
                }
                // Centred moments over the window.
                let (mi, mj) = (si / n, sj / n);
                let cross = sij - n * mi * mj;
                let vi = sii - n * mi * mi;
                let vj = sjj - n * mj * mj;
                total += cross * cross / (vi * vj + 1e-5);
            }
        }
    }
    -total / (d[0] * d[1] * d[2]) as f64
}

fn entropy<K: Ord>(counts: &BTreeMap<K, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[test]
fn oracle_equivalence() {
    let _g = serial();
    const CASES: usize = 100;
    let mut r = rng(99);
    let mut failures: Vec<String> = Vec::new();
    let mut counts: Vec<(&str, usize)> = Vec::new();

    let mut done = 0;
    for _ in 0..CASES {
        let n = r.gen_range(1..3);
        let cin = r.gen_range(1..4);
        let cout = r.gen_range(1..4);
        let ks = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..=ks / 2);
        let d: [usize; 3] = std::array::from_fn(|_| r.gen_range(ks.max(2)..7));
        let xs = [n, cin, d[0], d[1], d[2]];
        let x = uniform(&mut r, xs.iter().product(), -1.0, 1.0);
        let k = uniform(&mut r, cout * cin * ks * ks * ks, -1.0, 1.0);
        let (expect, o) = conv_oracle(&x, xs, &k, [cout, ks], stride, pad);
        let got = conv3d(
            &tensor::<f64>(&xs, &x),
            &tensor::<f64>(&[cout, cin, ks, ks, ks], &k),
            stride,
            pad,
        )
        .unwrap();
        if got.shape() != [n, cout, o[0], o[1], o[2]]
            || got
                .data()
                .iter()
                .zip(&expect)
                .any(|(a, b)| !close(*a, *b, 1e-10))
        {
            failures.push(format!("conv3d {xs:?} k{ks} s{stride} p{pad}"));
        }
        done += 1;
    }
    counts.push(("conv3d", done));

    done = 0;
    for _ in 0..CASES {
        let d: [usize; 3] = std::array::from_fn(|_| r.gen_range(2..7));
        let fits: Vec<usize> = [1, 3, 5]
            .into_iter()
            .filter(|&w| w <= *d.iter().min().unwrap())
            .collect();
        let win = fits[r.gen_range(0..fits.len())];
        let nv = d.iter().product();
        let w = uniform(&mut r, nv, 0.0, 1.0);
        let t = uniform(&mut r, nv, 0.0, 1.0);
        let shape = [1, 1, d[0], d[1], d[2]];
        let got = local_ncc_loss(&tensor::<f64>(&shape, &w), &tensor::<f64>(&shape, &t), win)
            .unwrap()
            .item();
        let expect = ncc_oracle(&w, &t, d, win);
        if !close(got, expect, 1e-9) {
            failures.push(format!("ncc {d:?} w{win}: {got} vs {expect}"));
        }
        done += 1;
    }
    counts.push(("local NCC", done));

    done = 0;
    for _ in 0..CASES {
        let c = r.gen_range(1..5);
        let d: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..5));
        let nv: usize = d.iter().product();
        let raw = uniform(&mut r, c * nv, 0.0, 1.0);
        let mut pred = vec![0.0; c * nv];
        for v in 0..nv {
            let s: f64 = (0..c).map(|k| raw[k * nv + v]).sum();
            for k in 0..c {
                pred[k * nv + v] = raw[k * nv + v] / s;
            }
        }
        let lab: Vec<f64> = uniform(&mut r, c * nv, 0.0, 1.0);
        let mut expect = 0.0;
        for k in 0..c {
            for v in 0..nv {
                expect -= lab[k * nv + v] * (pred[k * nv + v] + 1e-8).ln();
            }
        }
        expect /= nv as f64;
        let shape = [1, c, d[0], d[1], d[2]];
        let got = cross_entropy_seg(&tensor::<f64>(&shape, &pred), &tensor::<f64>(&shape, &lab))
            .unwrap()
            .item();
        if !close(got, expect, 1e-10) {
            failures.push(format!("cross entropy {shape:?}: {got} vs {expect}"));
        }
        done += 1;
    }
    counts.push(("cross-entropy", done));

    done = 0;
    for _ in 0..CASES {
        let d: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..7));
        let m = uniform(&mut r, d.iter().product(), 0.0, 1.0);
        let at = |x: usize, y: usize, z: usize| m[(x * d[1] + y) * d[2] + z];
        let mut expect = 0.0;
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    // Replicate boundary: the step past the last voxel is zero.
                    let gx = at((x + 1).min(d[0] - 1), y, z) - at(x, y, z);
                    let gy = at(x, (y + 1).min(d[1] - 1), z) - at(x, y, z);
                    let gz = at(x, y, (z + 1).min(d[2] - 1)) - at(x, y, z);
                    expect += gx * gx + gy * gy + gz * gz;
                }
            }
        }
        let got = mask_smoothness(&tensor::<f64>(&d, &m)).unwrap().item();
        if !close(got, expect, 1e-10) {
            failures.push(format!("smoothness {d:?}: {got} vs {expect}"));
        }
        done += 1;
    }
    counts.push(("smoothness", done));

    done = 0;
    for i in 0..CASES {
        let n = r.gen_range(1..200);
        let density = if i % 10 == 0 {
            0.0
        } else {
            r.gen_range(0.0..1.0)
        };
        let p: Vec<f32> = (0..n).map(|_| f32::from(r.gen_bool(density))).collect();
        let t: Vec<f32> = (0..n).map(|_| f32::from(r.gen_bool(density))).collect();
        let ps: HashSet<usize> = (0..n).filter(|&k| p[k] == 1.0).collect();
        let ts: HashSet<usize> = (0..n).filter(|&k| t[k] == 1.0).collect();
        let expect = if ps.is_empty() && ts.is_empty() {
            1.0
        } else {
            2.0 * ps.intersection(&ts).count() as f64 / (ps.len() + ts.len()) as f64
        };
        let got = dice(&p, &t).unwrap();
        if got != expect {
            failures.push(format!("dice n={n}: {got} vs {expect}"));
        }
        done += 1;
    }
    counts.push(("Dice", done));

    done = 0;
    for _ in 0..CASES {
        let n = r.gen_range(1..500);
        let w: Vec<f32> = (0..n).map(|_| r.gen_range(-0.1..1.1f32)).collect();
        let coupled = r.gen_range(0.0..1.0f32);
        let t: Vec<f32> = w
            .iter()
            .map(|&v| coupled * v + (1.0 - coupled) * r.gen_range(0.0..1.0f32))
            .collect();
        let bin = |v: f32| {
            ((v.clamp(0.0, 1.0) as f64 * MI_BINS as f64).floor() as usize).min(MI_BINS - 1)
        };
        let (mut hw, mut ht, mut hj) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for (&a, &b) in w.iter().zip(&t) {
            *hw.entry(bin(a)).or_insert(0) += 1;
            *ht.entry(bin(b)).or_insert(0) += 1;
            *hj.entry((bin(a), bin(b))).or_insert(0) += 1;
        }
        let nn = n as f64;
        let expect = (entropy(&hw, nn) + entropy(&ht, nn) - entropy(&hj, nn)).max(0.0);
        let got = mutual_information(&w, &t, MI_BINS).unwrap();
        if (got - expect).abs() > 1e-9 {
            failures.push(format!("MI n={n}: {got} vs {expect}"));
        }
        done += 1;
    }
    counts.push(("MI", done));

    let ok = failures.is_empty();
    let summary: Vec<String> = counts.iter().map(|(n, c)| format!("{n} {c}")).collect();
    report(
        "oracle equivalence",
        ok,
        &format!(
            "instances: {}{}",
            summary.join(", "),
            if ok {
                String::new()
            } else {
                format!(
                    "; failed: {}",
                    failures
                        .iter()
                        .take(5)
                        .cloned()
                        .collect::<Vec<_>>()
                        .join(", ")
                )
            }
        ),
    );
    assert!(ok, "{failures:?}");
}

// ---------------------------------------------------------------------------
// Algebra

fn random_affine(r: &mut ChaCha8Rng) -> AffineMatrix {
    let t: [f64; 3] = std::array::from_fn(|_| r.gen_range(-8.0..8.0));
    let a: [f64; 3] = std::array::from_fn(|_| r.gen_range(-30.0..30.0));
    let s: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.8..1.25));
    compose(
        &AffineMatrix::translation(t),
        &compose(&AffineMatrix::rotation_deg(a), &AffineMatrix::scaling(s)),
    )
}

#[test]
fn algebra() {
    let _g = serial();
    let mut failures = Vec::new();

    // Composed transforms against explicit products of the incrementals.
    let spec = PhantomSpec::default().scaled_to([16, 16, 16]);
    let (img, labels) = make_atlas(&spec).unwrap();
    let stages = Stages::default();
    let mut worst_product: f64 = 0.0;
    for seed in 0..4 {
        let atlas = Atlas::<f32>::new(&img, &labels).unwrap();
        let mut m = JersModel::new(ArchConfig::desk(), stages, atlas, seed).unwrap();
        m.nets.randomize(0.05, 100 + seed).unwrap();
        let s = generate_phantom(&spec, 40 + seed)
            .unwrap()
            .image
            .batched()
            .unwrap();
        let art = forward(&m, &s, true).unwrap();
        let mut acc = AffineMatrix::IDENTITY;
        for (k, inc) in art.incremental.iter().enumerate() {
            acc = compose(&matrix_of(inc).unwrap(), &acc);
            let got = matrix_of(&art.composed[k + 1]).unwrap();
            worst_product = worst_product.max(got.max_abs_diff(&acc));
        }
    }
    if worst_product > 1e-6 {
        failures.push(format!("product {worst_product:.2e}"));
    }

    // Inverse of a composition, in f64 matrices and through the f32 tensor ops.
    let mut r = rng(8);
    let mut worst_inverse: f64 = 0.0;
    for _ in 0..100 {
        let (a, b) = (random_affine(&mut r), random_affine(&mut r));
        let ab = compose(&a, &b);
        let lhs = invert(&ab).unwrap();
        let rhs = compose(&invert(&b).unwrap(), &invert(&a).unwrap());
        worst_inverse = worst_inverse.max(lhs.max_abs_diff(&rhs));
        let undo = compose(&lhs, &ab);
        worst_inverse = worst_inverse.max(undo.max_abs_diff(&AffineMatrix::IDENTITY));

        let ta = tensor::<f32>(&[4, 4], &a.to_row_major());
        let tb = tensor::<f32>(&[4, 4], &b.to_row_major());
        let t_lhs = inverse_matrix(&matmul(&ta, &tb).unwrap()).unwrap();
        let t_rhs = matmul(&inverse_matrix(&tb).unwrap(), &inverse_matrix(&ta).unwrap()).unwrap();
        let d = matrix_of(&t_lhs)
            .unwrap()
            .max_abs_diff(&matrix_of(&t_rhs).unwrap());
        worst_inverse = worst_inverse.max(d);
    }
    if worst_inverse > 1e-5 {
        failures.push(format!("inverse law {worst_inverse:.2e}"));
    }

    // W^N equals E^M exactly at initialization.
    let spec = PhantomSpec::default();
    let (img, labels) = make_atlas(&spec).unwrap();
    let mut init_cases = 0;
    for seed in 0..3 {
        let atlas = Atlas::<f32>::new(&img, &labels).unwrap();
        let m = JersModel::new(ArchConfig::desk(), stages, atlas, seed).unwrap();
        let src = generate_phantom(&spec, 60 + seed).unwrap().image;
        let art = forward(&m, &src.batched().unwrap(), true).unwrap();
        if art.warped_final().data() != art.extracted_final().data() {
            failures.push(format!("training pass seed {seed}"));
        }
        let inf = infer(&m, &src).unwrap();
        if inf.warped.values() != inf.extracted.values() {
            failures.push(format!("inference seed {seed}"));
        }
        init_cases += 2;
    }

    let ok = failures.is_empty();
    report(
        "algebra",
        ok,
        &format!(
            "composed vs product {worst_product:.2e}, inverse law {worst_inverse:.2e} over 100 pairs, \
             W^N == E^M in {init_cases} initial passes{}",
            if ok { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    );
    assert!(ok, "{failures:?}");
}

// ---------------------------------------------------------------------------
// Trained runs

fn acceptance_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.splits = SplitSizes {
        train: 20,
        val: 5,
        test: 5,
    };
    c.training.steps = TRAIN_STEPS;
    c.training.optimizer.lr = TRAIN_LR;
    c.training.val_every = 50;
    c.images = false;
    c.ablate = vec![
        Variant::Full,
        Variant::NoExt,
        Variant::NoReg,
        Variant::SingleStage,
    ];
    c
}

struct Trained {
    rows: Vec<GridRow>,
    full_minutes: f64,
    dir: tempfile::TempDir,
}

fn trained() -> &'static Trained {
    static RUNS: OnceLock<Trained> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let rows = cmd_ablate(&acceptance_config(), &dir.path().join("ablate"), false).unwrap();
        let full_minutes = fs::read_to_string(dir.path().join("ablate/full/timing.jsonl"))
            .unwrap()
            .lines()
            .last()
            .map(|l| {
                serde_json::from_str::<serde_json::Value>(l).unwrap()["seconds"]
                    .as_f64()
                    .unwrap()
            })
            .unwrap_or(0.0)
            / 60.0;
        Trained {
            rows,
            full_minutes,
            dir,
        }
    })
}

fn row(rows: &[GridRow], v: Variant) -> &GridRow {
    rows.iter().find(|r| r.value == v.name()).unwrap()
}

#[test]
fn end_to_end() {
    let _g = serial();
    let t = trained();
    let s = row(&t.rows, Variant::Full).summary;
    // A near-empty binarized extraction makes the MI comparison vacuous.
    let degenerate = s.dice_ext < 0.05;
    let ext = s.dice_ext >= 0.90;
    let seg = s.dice_seg >= 0.75;
    let mi = s.mi_reg >= s.mi_unregistered;
    let budget = t.full_minutes <= 30.0;
    let ok = ext && seg && mi && budget && s.cases == 5;
    report(
        "end-to-end",
        ok,
        &format!(
            "{} held-out cases: Dice_ext {:.3} (>= 0.90 {}), Dice_seg {:.3} (>= 0.75 {}), \
             MI(W^N,T) {:.4} vs MI(E^M,T) {:.4} ({}{}), training {:.1} min",
            s.cases,
            s.dice_ext,
            ext,
            s.dice_seg,
            seg,
            s.mi_reg,
            s.mi_unregistered,
            mi,
            if degenerate {
                ", degenerate: E^M is near empty"
            } else {
                ""
            },
            t.full_minutes
        ),
    );
    assert!(ok, "{s:?}");
}

#[test]
fn training_loss_trends_down() {
    let _g = serial();
    let t = trained();
    let text = fs::read_to_string(t.dir.path().join("ablate/full").join(TRAIN_LOG)).unwrap();
    let totals: Vec<f64> = text
        .lines()
        .filter_map(|l| match serde_json::from_str(l).unwrap() {
            LogRecord::Step(s) if s.step <= 200 => Some(s.total),
            _ => None,
        })
        .collect();
    let avg: Vec<f64> = totals
        .windows(20)
        .map(|w| w.iter().sum::<f64>() / 20.0)
        .collect();
    let rises = avg.windows(2).filter(|w| w[1] > w[0]).count();
    let ok = !avg.is_empty() && rises == 0;
    report(
        "loss trend (first 200 steps)",
        ok,
        &format!(
            "20-step moving average {:.4} -> {:.4}, {rises} increases over {} windows",
            avg.first().copied().unwrap_or(f64::NAN),
            avg.last().copied().unwrap_or(f64::NAN),
            avg.len()
        ),
    );
    assert!(ok);
}

#[test]
fn ablation() {
    let _g = serial();
    let rows = &trained().rows;
    let full = row(rows, Variant::Full).summary;
    let no_ext = row(rows, Variant::NoExt).summary;
    let no_reg = row(rows, Variant::NoReg).summary;
    let single = row(rows, Variant::SingleStage).summary;
    let beats_ext = full.dice_seg - no_ext.dice_seg >= 0.10;
    let beats_reg = full.dice_seg - no_reg.dice_seg >= 0.10;
    let beats_single = full.dice_ext > single.dice_ext
        && full.mi_reg > single.mi_reg
        && full.dice_seg > single.dice_seg;
    let ok = beats_ext && beats_reg && beats_single;
    let fmt = |n: &str, s: &jers_cli::commands::EvalSummary| {
        format!(
            "{n} ({:.3}, {:.4}, {:.3})",
            s.dice_ext, s.mi_reg, s.dice_seg
        )
    };
    report(
        "ablation",
        ok,
        &format!(
            "(Dice_ext, MI, Dice_seg): {}, {}, {}, {}; full - no_ext Dice_seg {:+.3}, \
             full - no_reg {:+.3}, full beats single_stage on all three {}{}",
            fmt("full", &full),
            fmt("no_ext", &no_ext),
            fmt("no_reg", &no_reg),
            fmt("single_stage", &single),
            full.dice_seg - no_ext.dice_seg,
            full.dice_seg - no_reg.dice_seg,
            beats_single,
            if full.dice_ext < 0.05 && single.dice_ext < 0.05 {
                " (degenerate: both extractions near empty)"
            } else {
                ""
            }
        ),
    );
    assert!(ok);
}

#[test]
fn stage_sweep() {
    let _g = serial();
    let rows = &trained().rows;
    // single_stage is the (1, 1) cell of the sweep, trained on the same data.
    let five = row(rows, Variant::Full).summary;
    let one = row(rows, Variant::SingleStage).summary;
    let ok = five.dice_ext > one.dice_ext && five.dice_seg > one.dice_seg;
    let degenerate = five.dice_ext < 0.05 && one.dice_ext < 0.05;
    report(
        "stage sweep",
        ok,
        &format!(
            "(5,5) Dice_ext {:.3} Dice_seg {:.3} vs (1,1) Dice_ext {:.3} Dice_seg {:.3}{}",
            five.dice_ext,
            five.dice_seg,
            one.dice_ext,
            one.dice_seg,
            if degenerate {
                "; degenerate: both extractions near empty"
            } else {
                ""
            }
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Determinism

#[test]
fn determinism() {
    let _g = serial();
    let mut cfg = RunConfig::default();
    cfg.phantom = PhantomSpec::default().scaled_to([16, 16, 16]);
    cfg.splits = SplitSizes {
        train: 4,
        val: 2,
        test: 2,
    };
    cfg.stages = Stages {
        extraction: 2,
        registration: 2,
    };
    cfg.training.steps = 12;
    cfg.training.val_every = 4;
    cfg.training.optimizer.lr = 1e-3;
    cfg.images = false;
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_train(&cfg, &a, false).unwrap();
    cmd_train(&cfg, &b, false).unwrap();
    let same = |f: &str| -> bool {
        let read = |d: &Path| fs::read(d.join(f)).unwrap();
        read(&a) == read(&b)
    };
    let files = [LAST_CKPT, BEST_CKPT, TRAIN_LOG, RUN_MANIFEST];
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(f)).collect();
    let ok = differing.is_empty();
    report(
        "determinism",
        ok,
        &format!(
            "two sequential 12-step runs: {}",
            if ok {
                format!("{} identical", files.join(", "))
            } else {
                format!("differ: {}", differing.join(", "))
            }
        ),
    );
    assert!(ok);
}
