//! Finite-difference gradient checks over every differentiable component,
//! used by the `bench-gradcheck` verb and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsnn_core::losses::{cross_entropy, mse, multilabel_entropy, nll, LossOutput};
use wsnn_core::nn::{
    gradient_check, log_softmax_rows, rel_err, Activation, ActivationKind, AvgPool2d, BatchNorm2d, Conv2d, Dropout,
    Flatten, InitScheme, Layer, Linear, LogSoftmax, MaxPool2d, Sequential,
};
use wsnn_core::stn::{
    affine_grid, affine_grid_backward, bilinear_sample, bilinear_sample_backward, AffineMode, BilinearResize,
    LocalizerInput, SpatialTransformer,
};
use wsnn_core::tensor::ConvGeometry;
use wsnn_core::wsl::{MilMaxPool, WeldonPool};
use wsnn_core::Tensor;

use crate::error::Result;

/// Tolerance for smooth components.
pub const TOL_SMOOTH: f64 = 1e-4;
/// Tolerance for batch normalization and bilinear sampling.
pub const TOL_KINKED: f64 = 1e-3;
/// Finite-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("valid shape")
}

/// Uniform values pushed at least `gap` away from zero, so ReLU-type kinks
/// stay outside the finite-difference stencil.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let t = uniform(shape, -1.0, 1.0, rng);
    t.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Max relative error of `grad` against central differences of `f` at `x`.
fn check_fn(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, grad: &Tensor<f64>) -> f64 {
    let mut worst = 0.0f64;
    let mut p = x.clone();
    for i in 0..x.len() {
        let orig = x.as_slice()[i];
        p.as_mut_slice()[i] = orig + STEP;
        let plus = f(&p);
        p.as_mut_slice()[i] = orig - STEP;
        let minus = f(&p);
        p.as_mut_slice()[i] = orig;
        worst = worst.max(rel_err(grad.as_slice()[i], (plus - minus) / (2.0 * STEP)));
    }
    worst
}

fn check_loss(f: impl Fn(&Tensor<f64>) -> wsnn_core::Result<LossOutput<f64>>, x: &Tensor<f64>) -> Result<f64> {
    let g = f(x)?.grad;
    Ok(check_fn(|p| f(p).map(|o| o.value).unwrap_or(f64::NAN), x, &g))
}

fn layer(
    cases: &mut Vec<GradCase>,
    name: &str,
    seed: u64,
    tol: f64,
    l: &mut dyn Layer<f64>,
    x: &Tensor<f64>,
) -> Result<()> {
    let r = gradient_check(l, x, STEP, seed)?;
    cases.push(GradCase {
        name: name.to_string(),
        seed,
        max_rel_err: r.max_rel_err,
        tolerance: tol,
    });
    Ok(())
}

fn transformer(
    mode: AffineMode,
    input: LocalizerInput,
    loc_side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SpatialTransformer<f64>> {
    let p = mode.num_params();
    let mut loc = Sequential::new();
    loc.push("flatten", Flatten::new())?;
    loc.push("fc1", Linear::new(loc_side * loc_side, 6)?)?;
    loc.push("act", Activation::new(ActivationKind::Tanh))?;
    loc.push("fc2", Linear::new(6, p)?)?;
    let mut st = SpatialTransformer::new(loc, mode, 0.7, (5, 6), input)?;
    st.init_params(InitScheme::FanInSqrt, rng);
    // Move away from the identity, where every sample lands on a pixel centre.
    for (name, prm) in st.params_mut() {
        let scale = if name.ends_with("fc2.weight") { 0.2 } else { 0.0 };
        for v in prm.value.as_mut_slice() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
        if name.ends_with("fc2.bias") {
            for v in prm.value.as_mut_slice() {
                *v = 0.9 * *v + rng.random_range(-0.15..0.15);
            }
        }
    }
    Ok(st)
}

/// Runs every check for one seed.
pub fn gradcheck_seed(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let init = |l: &mut dyn Layer<f64>, rng: &mut ChaCha8Rng| l.init_params(InitScheme::FanInSqrt, rng);

    let mut lin = Linear::new(7, 5)?;
    init(&mut lin, &mut rng);
    lin.params_mut()[1].1.value = uniform(&[5], -0.5, 0.5, &mut rng);
    let x = uniform(&[3, 7], -1.0, 1.0, &mut rng);
    layer(&mut out, "linear", seed, TOL_SMOOTH, &mut lin, &x)?;

    let mut conv = Conv2d::new(2, 3, ConvGeometry::new(3, 2, 1))?;
    init(&mut conv, &mut rng);
    let x = uniform(&[2, 2, 7, 9], -1.0, 1.0, &mut rng);
    layer(&mut out, "conv2d stride 2 pad 1", seed, TOL_SMOOTH, &mut conv, &x)?;
    let mut conv = Conv2d::square(3, 4, 5, 1, 0)?;
    init(&mut conv, &mut rng);
    let x = uniform(&[2, 3, 8, 9], -1.0, 1.0, &mut rng);
    layer(&mut out, "conv2d 5x5", seed, TOL_SMOOTH, &mut conv, &x)?;

    let x = uniform(&[2, 2, 6, 6], -1.0, 1.0, &mut rng);
    layer(&mut out, "maxpool 2x2", seed, TOL_SMOOTH, &mut MaxPool2d::square(2), &x)?;
    let x = uniform(&[2, 2, 7, 7], -1.0, 1.0, &mut rng);
    layer(
        &mut out,
        "maxpool 3x3 s2 p1",
        seed,
        TOL_SMOOTH,
        &mut MaxPool2d::new(ConvGeometry::new(3, 2, 1)),
        &x,
    )?;
    layer(
        &mut out,
        "avgpool 3x3 s2 p1",
        seed,
        TOL_SMOOTH,
        &mut AvgPool2d::new(ConvGeometry::new(3, 2, 1)),
        &x,
    )?;

    for (name, kind) in [
        ("relu", ActivationKind::Relu),
        ("sigmoid", ActivationKind::Sigmoid),
        ("tanh", ActivationKind::Tanh),
    ] {
        let x = away_from_zero(&[4, 6], 0.05, &mut rng);
        layer(&mut out, name, seed, TOL_SMOOTH, &mut Activation::new(kind), &x)?;
    }

    let x = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
    layer(&mut out, "flatten", seed, TOL_SMOOTH, &mut Flatten::new(), &x)?;

    let mut drop = Dropout::new(0.3, seed)?;
    drop.freeze_mask(true);
    let x = uniform(&[4, 8], -1.0, 1.0, &mut rng);
    layer(&mut out, "dropout", seed, TOL_SMOOTH, &mut drop, &x)?;

    let mut bn = BatchNorm2d::new(3)?;
    for (_, p) in bn.params_mut() {
        p.value = uniform(p.value.shape(), 0.5, 1.5, &mut rng);
    }
    let x = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
    layer(&mut out, "batchnorm2d", seed, TOL_KINKED, &mut bn, &x)?;

    let x = uniform(&[4, 10], -3.0, 3.0, &mut rng);
    layer(&mut out, "logsoftmax", seed, TOL_SMOOTH, &mut LogSoftmax::new(), &x)?;

    let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    layer(&mut out, "mil_max_pool", seed, TOL_SMOOTH, &mut MilMaxPool::new(), &x)?;
    layer(
        &mut out,
        "weldon_pool k=2",
        seed,
        TOL_SMOOTH,
        &mut WeldonPool::new(2)?,
        &x,
    )?;

    let x = uniform(&[2, 2, 7, 9], -1.0, 1.0, &mut rng);
    layer(
        &mut out,
        "bilinear_resize down",
        seed,
        TOL_KINKED,
        &mut BilinearResize::new(4, 5)?,
        &x,
    )?;
    let x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    layer(
        &mut out,
        "bilinear_resize up",
        seed,
        TOL_KINKED,
        &mut BilinearResize::new(7, 6)?,
        &x,
    )?;

    // Sampler and grid generator on their own.
    let u = uniform(&[2, 2, 6, 7], -1.0, 1.0, &mut rng);
    let grid = uniform(&[2, 4, 5, 2], -1.15, 1.15, &mut rng);
    let w = uniform(&[2, 2, 4, 5], -1.0, 1.0, &mut rng);
    let dot = |a: &Tensor<f64>| -> f64 { a.as_slice().iter().zip(w.as_slice()).map(|(p, q)| p * q).sum() };
    let (du, dgrid) = bilinear_sample_backward(&u, &grid, &w)?;
    let e_u = check_fn(|p| dot(&bilinear_sample(p, &grid).unwrap()), &u, &du);
    let e_g = check_fn(|p| dot(&bilinear_sample(&u, p).unwrap()), &grid, &dgrid);
    out.push(GradCase {
        name: "bilinear_sample".into(),
        seed,
        max_rel_err: e_u.max(e_g),
        tolerance: TOL_KINKED,
    });
    let a = uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
    let wg = uniform(&[2, 4, 5, 2], -1.0, 1.0, &mut rng);
    let dotg = |g: &Tensor<f64>| -> f64 { g.as_slice().iter().zip(wg.as_slice()).map(|(p, q)| p * q).sum() };
    let da = affine_grid_backward(&wg)?;
    out.push(GradCase {
        name: "affine_grid".into(),
        seed,
        max_rel_err: check_fn(|p| dotg(&affine_grid(p, 4, 5).unwrap()), &a, &da),
        tolerance: TOL_SMOOTH,
    });

    for mode in [
        AffineMode::Translation,
        AffineMode::TranslationScale,
        AffineMode::TranslationScaleRotation,
        AffineMode::Affine,
    ] {
        let mut st = transformer(mode, LocalizerInput::Full, 7, &mut rng)?;
        let x = uniform(&[2, 1, 7, 7], 0.0, 1.0, &mut rng);
        layer(
            &mut out,
            &format!("spatial_transformer {}", mode.name()),
            seed,
            TOL_KINKED,
            &mut st,
            &x,
        )?;
    }
    let mut st = transformer(
        AffineMode::TranslationScale,
        LocalizerInput::Downsampled(4, 4),
        4,
        &mut rng,
    )?;
    let x = uniform(&[2, 1, 9, 8], 0.0, 1.0, &mut rng);
    layer(
        &mut out,
        "spatial_transformer 3p downsampled",
        seed,
        TOL_KINKED,
        &mut st,
        &x,
    )?;

    let mut net = Sequential::new();
    net.push("conv", Conv2d::square(1, 3, 3, 1, 0)?)?;
    net.push("relu", Activation::relu())?;
    net.push("pool", MaxPool2d::square(2))?;
    net.push("flatten", Flatten::new())?;
    net.push("fc", Linear::new(12, 4)?)?;
    net.push("logsoftmax", LogSoftmax::new())?;
    init(&mut net, &mut rng);
    let x = uniform(&[2, 1, 6, 6], -1.0, 1.0, &mut rng);
    layer(&mut out, "sequential", seed, TOL_SMOOTH, &mut net, &x)?;

    let x = uniform(&[3, 5], -2.0, 2.0, &mut rng);
    let y = uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let t: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
    let bits = Tensor::from_fn(&[3, 5], |_| if rng.random::<bool>() { 1.0 } else { 0.0 })?;
    let logp = log_softmax_rows(&x)?;
    for (name, err) in [
        ("loss mse", check_loss(|p| mse(p, &y), &x)?),
        ("loss cross_entropy", check_loss(|p| cross_entropy(p, &t), &x)?),
        ("loss nll", check_loss(|p| nll(p, &t), &logp)?),
        ("loss multilabel", check_loss(|p| multilabel_entropy(p, &bits), &x)?),
    ] {
        out.push(GradCase {
            name: name.into(),
            seed,
            max_rel_err: err,
            tolerance: TOL_SMOOTH,
        });
    }
    Ok(out)
}

/// Every check for seeds `1..=seeds`.
pub fn gradcheck_suite(seeds: u64) -> Result<Vec<GradCase>> {
    let mut all = Vec::new();
    for s in 1..=seeds {
        all.extend(gradcheck_seed(s)?);
    }
    Ok(all)
}
