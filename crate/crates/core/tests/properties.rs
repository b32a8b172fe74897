use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsnn_core::data::{make_translated_mnist, LabeledDataset, NormalizationStats, Storage};
use wsnn_core::losses::{cross_entropy, mse, multilabel_entropy};
use wsnn_core::nn::{
    Activation, ActivationKind, BatchNorm2d, Conv2d, Dropout, Flatten, InitScheme, Layer, Linear, Sequential,
};
use wsnn_core::optim::{OptimConfig, Optimizer};
use wsnn_core::stn::{
    affine_grid, bilinear_sample, expand_params, resize_bilinear, AffineMode, LocalizerInput, SpatialTransformer,
};
use wsnn_core::tensor::{col2im, im2col, ConvGeometry};
use wsnn_core::wsl::{mil_max_pool, weldon_pool};
use wsnn_core::Tensor;

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduce_max_index_points_at_the_max(x in tensor(&[3, 4, 5]), axis in 0usize..3) {
        let r = x.reduce_max_with_index(&[axis]).unwrap();
        for (v, &i) in r.values.as_slice().iter().zip(&r.indices) {
            prop_assert_eq!(*v, x.as_slice()[i]);
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint(
        x in tensor(&[2, 6, 6]),
        k in 1usize..=3, s in 1usize..=2, p in 0usize..=1,
        seed in any::<u64>(),
    ) {
        prop_assume!(p < k && (6 + 2 * p - k) % s == 0);
        let g = ConvGeometry::new(k, s, p);
        let cols = im2col(&x, &g).unwrap();
        let y = Tensor::from_fn(cols.shape(), |i| ((i as u64).wrapping_mul(seed | 1) % 17) as f64 - 8.0).unwrap();
        let lhs: f64 = cols.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, 2, 6, 6, &g).unwrap();
        let rhs: f64 = x.as_slice().iter().zip(back.as_slice()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn eval_forward_is_pure(x in tensor(&[4, 2, 5, 5]), seed in any::<u64>()) {
        let mut net: Sequential<f64> = Sequential::new();
        net.push("conv", Conv2d::square(2, 3, 3, 1, 1).unwrap()).unwrap();
        net.push("bn", BatchNorm2d::new(3).unwrap()).unwrap();
        net.push("relu", Activation::relu()).unwrap();
        net.push("drop", Dropout::new(0.5, seed).unwrap()).unwrap();
        net.push("flatten", Flatten::new()).unwrap();
        net.push("fc", Linear::new(75, 4).unwrap()).unwrap();
        net.init_params(InitScheme::FanInSqrt, &mut ChaCha8Rng::seed_from_u64(seed));
        // One training pass so running statistics are not at their defaults.
        net.forward(&x).unwrap();
        net.set_training(false);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(x in tensor(&[3, 6]), c in -50.0f64..50.0, t in prop::collection::vec(0usize..6, 3)) {
        let shifted = x.map(|v| v + c);
        let a = cross_entropy(&x, &t).unwrap().value;
        let b = cross_entropy(&shifted, &t).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-6);
    }

    #[test]
    fn losses_are_non_negative(x in tensor(&[3, 4]), y in tensor(&[3, 4]), t in prop::collection::vec(0usize..4, 3), bits in prop::collection::vec(any::<bool>(), 12)) {
        let multi = Tensor::from_vec(&[3, 4], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        prop_assert!(mse(&x, &y).unwrap().value >= 0.0);
        prop_assert!(cross_entropy(&x, &t).unwrap().value >= 0.0);
        prop_assert!(multilabel_entropy(&x, &multi).unwrap().value >= 0.0);
        prop_assert_eq!(mse(&x, &x).unwrap().value, 0.0);
        prop_assert_eq!(mse(&x, &y).unwrap().value == 0.0, x == y);
    }

    #[test]
    fn decayed_learning_rate_never_increases(lr in 1e-5f64..1.0, d in 0.0f64..1.0, t in 0u64..10_000) {
        let cfg = OptimConfig { lr_decay: d, ..OptimConfig::adam(lr) };
        prop_assert!(cfg.lr_at(t + 1) <= cfg.lr_at(t));
    }

    #[test]
    fn weight_decay_shrinks_norm_without_gradient(w in tensor(&[3, 4]), wd in 1e-4f64..0.1) {
        prop_assume!(w.as_slice().iter().any(|&v| v != 0.0));
        let mut fc = Linear::from_weights(w, Tensor::zeros(&[3]).unwrap()).unwrap();
        let norm = |l: &Linear<f64>| l.weight.value.as_slice().iter().map(|v| v * v).sum::<f64>();
        let mut opt = Optimizer::new(OptimConfig { weight_decay: wd, ..OptimConfig::sgd(0.1) }).unwrap();
        let before = norm(&fc);
        fc.zero_grad();
        opt.step(&mut fc).unwrap();
        prop_assert!(norm(&fc) < before);
    }

    #[test]
    fn weldon_k1_is_max_plus_min(z in tensor(&[2, 3, 3, 4])) {
        let (w, _) = weldon_pool(&z, 1).unwrap();
        let (m, _) = mil_max_pool(&z).unwrap();
        let mins: Vec<f64> = z.as_slice().chunks(12).map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).collect();
        for ((a, b), c) in w.as_slice().iter().zip(m.as_slice()).zip(&mins) {
            prop_assert!((a - (b + c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn heads_are_class_permutation_covariant(z in tensor(&[2, 4, 3, 3]), perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(), k in 1usize..=4) {
        let plane = 9;
        let mut zp = z.clone();
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                let (d, s) = ((b * 4 + dst) * plane, (b * 4 + src) * plane);
                zp.as_mut_slice()[d..d + plane].copy_from_slice(&z.as_slice()[s..s + plane]);
            }
        }
        for pool in [|t: &Tensor<f64>, _k| mil_max_pool(t).unwrap().0, |t: &Tensor<f64>, k| weldon_pool(t, k).unwrap().0] {
            let (a, b) = (pool(&z, k), pool(&zp, k));
            for bi in 0..2 {
                for (dst, &src) in perm.iter().enumerate() {
                    prop_assert_eq!(b.as_slice()[bi * 4 + dst], a.as_slice()[bi * 4 + src]);
                }
            }
        }
    }

    #[test]
    fn constant_offset_shifts_heads(z in tensor(&[1, 3, 4, 4]), c in -4.0f64..4.0, k in 1usize..=8) {
        let shifted = z.map(|v| v + c);
        let (m0, m1) = (mil_max_pool(&z).unwrap().0, mil_max_pool(&shifted).unwrap().0);
        let (w0, w1) = (weldon_pool(&z, k).unwrap().0, weldon_pool(&shifted, k).unwrap().0);
        for (a, b) in m0.as_slice().iter().zip(m1.as_slice()) {
            prop_assert!((b - a - c).abs() <= 1e-12);
        }
        for (a, b) in w0.as_slice().iter().zip(w1.as_slice()) {
            prop_assert!((b - a - 2.0 * c).abs() <= 1e-12);
        }
    }

    #[test]
    fn heads_ignore_spatial_roll(z in tensor(&[2, 2, 4, 5]), dy in 0usize..4, dx in 0usize..5, k in 1usize..=10) {
        let mut rolled = z.clone();
        for plane in 0..4 {
            for y in 0..4 {
                for x in 0..5 {
                    rolled.as_mut_slice()[plane * 20 + ((y + dy) % 4) * 5 + (x + dx) % 5] = z.as_slice()[plane * 20 + y * 5 + x];
                }
            }
        }
        prop_assert_eq!(mil_max_pool(&z).unwrap().0, mil_max_pool(&rolled).unwrap().0);
        let (a, b) = (weldon_pool(&z, k).unwrap().0, weldon_pool(&rolled, k).unwrap().0);
        prop_assert!(close(a.as_slice(), b.as_slice(), 1e-12));
    }

    #[test]
    fn three_and_four_parameter_modes_agree_at_zero_rotation(s in 0.1f64..2.0, tx in -1.0f64..1.0, ty in -1.0f64..1.0) {
        let a = expand_params(&Tensor::from_vec(&[1, 3], vec![s, tx, ty]).unwrap(), AffineMode::TranslationScale, 1.0).unwrap();
        let b = expand_params(&Tensor::from_vec(&[1, 4], vec![s, 0.0, tx, ty]).unwrap(), AffineMode::TranslationScaleRotation, 1.0).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn modes_are_nested(scale in 0.2f64..1.5, s in 0.2f64..1.5, r in -1.0f64..1.0, tx in -0.5f64..0.5, ty in -0.5f64..0.5, u in tensor(&[1, 1, 6, 6])) {
        let raw = |v: Vec<f64>| Tensor::from_vec(&[1, v.len()], v).unwrap();
        let sample = |m: &Tensor<f64>| bilinear_sample(&u, &affine_grid(m, 5, 5).unwrap()).unwrap();
        // 2p at the fixed scale embeds in 3p.
        let m2 = expand_params(&raw(vec![tx, ty]), AffineMode::Translation, scale).unwrap();
        let m3 = expand_params(&raw(vec![scale, tx, ty]), AffineMode::TranslationScale, scale).unwrap();
        prop_assert!(close(sample(&m2).as_slice(), sample(&m3).as_slice(), 1e-6));
        // 3p embeds in 4p at zero rotation.
        let m3 = expand_params(&raw(vec![s, tx, ty]), AffineMode::TranslationScale, 1.0).unwrap();
        let m4 = expand_params(&raw(vec![s, 0.0, tx, ty]), AffineMode::TranslationScaleRotation, 1.0).unwrap();
        prop_assert!(close(sample(&m3).as_slice(), sample(&m4).as_slice(), 1e-6));
        // 4p embeds in 6p through its own matrix entries.
        let m4 = expand_params(&raw(vec![s, r, tx, ty]), AffineMode::TranslationScaleRotation, 1.0).unwrap();
        let m6 = expand_params(&raw(m4.as_slice().to_vec()), AffineMode::Affine, 1.0).unwrap();
        prop_assert!(close(sample(&m4).as_slice(), sample(&m6).as_slice(), 1e-6));
    }

    #[test]
    fn identity_transformer(u in tensor(&[2, 1, 7, 7]), out in 3usize..12) {
        let loc = || {
            let mut l = Sequential::new();
            l.push("flatten", Flatten::new()).unwrap();
            l.push("fc", Linear::new(49, 3).unwrap()).unwrap();
            l
        };
        let mut same = SpatialTransformer::new(loc(), AffineMode::TranslationScale, 1.0, (7, 7), LocalizerInput::Full).unwrap();
        prop_assert_eq!(same.forward(&u).unwrap(), u.clone());
        let mut other = SpatialTransformer::new(loc(), AffineMode::TranslationScale, 1.0, (out, out), LocalizerInput::Full).unwrap();
        let y = other.forward(&u).unwrap();
        let r = resize_bilinear(&u, out, out).unwrap();
        prop_assert!(close(y.as_slice(), r.as_slice(), 1e-12));
    }

    #[test]
    fn normalization_round_trips(pixels in prop::collection::vec(any::<u8>(), 2 * 16)) {
        prop_assume!(pixels.iter().any(|&p| p != pixels[0]));
        let ds = LabeledDataset::new(Storage::Dense { height: 4, width: 4, pixels }, vec![0, 1]).unwrap();
        let stats = NormalizationStats::compute(&ds).unwrap();
        let x: Tensor<f64> = ds.images().unwrap();
        let back = stats.denormalize(&stats.normalize(&x));
        prop_assert!(close(back.as_slice(), x.as_slice(), 1e-6));
    }
}

fn toy_digits(n: usize) -> LabeledDataset {
    let mut pixels = vec![0u8; n * 28 * 28];
    for (i, img) in pixels.chunks_mut(28 * 28).enumerate() {
        for y in 6..22 {
            for x in 10..(12 + i % 6) {
                img[y * 28 + x] = (40 + 20 * (i % 10) + y) as u8;
            }
        }
    }
    LabeledDataset::new(
        Storage::Dense {
            height: 28,
            width: 28,
            pixels,
        },
        (0..n).map(|i| (i % 10) as u8).collect(),
    )
    .unwrap()
}

#[test]
fn translated_digits_are_reproducible_and_exact() {
    let base = toy_digits(12);
    let a = make_translated_mnist(&base, 60, 5).unwrap();
    let b = make_translated_mnist(&base, 60, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, make_translated_mnist(&base, 60, 6).unwrap());

    let canvases: Tensor<f64> = a.images().unwrap();
    let padded: Tensor<f64> = wsnn_core::data::pad(&base, 32).unwrap().images().unwrap();
    let offsets = a.offsets().unwrap();
    for i in 0..a.len() {
        let canvas = canvases.outer(i);
        let digit = padded.outer(i);
        let (dx, dy) = (offsets[i].0 as usize, offsets[i].1 as usize);
        // Every canvas pixel is either the translated digit or background.
        for y in 0..60 {
            for x in 0..60 {
                let inside = (dy..dy + 32).contains(&y) && (dx..dx + 32).contains(&x);
                let want = if inside { digit[(y - dy) * 32 + (x - dx)] } else { 0.0 };
                assert_eq!(canvas[y * 60 + x], want, "item {i} at ({x},{y})");
            }
        }
        // Cross-correlation of the canvas with the digit peaks at the stored offset.
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for oy in 0..=28 {
            for ox in 0..=28 {
                let mut s = 0.0;
                for y in 0..32 {
                    for x in 0..32 {
                        s += canvas[(oy + y) * 60 + ox + x] * digit[y * 32 + x];
                    }
                }
                if s > best.0 {
                    best = (s, (ox, oy));
                }
            }
        }
        assert_eq!(best.1, (dx, dy), "item {i}");
    }
}

#[test]
fn optimizer_trajectories_are_bit_identical() {
    let run = || {
        let mut net: Sequential<f32> = Sequential::new();
        net.push("fc1", Linear::new(6, 5).unwrap()).unwrap();
        net.push("tanh", Activation::new(ActivationKind::Tanh)).unwrap();
        net.push("fc2", Linear::new(5, 3).unwrap()).unwrap();
        net.init_params(InitScheme::FanInSqrt, &mut ChaCha8Rng::seed_from_u64(3));
        let mut opt = Optimizer::new(OptimConfig::adam(1e-2)).unwrap();
        let x = Tensor::from_fn(&[4, 6], |i| (i as f32 * 0.37).sin()).unwrap();
        for _ in 0..20 {
            let y = net.forward(&x).unwrap();
            let loss = cross_entropy(&y, &[0, 1, 2, 1]).unwrap();
            net.zero_grad();
            net.backward(&loss.grad).unwrap();
            opt.step(&mut net).unwrap();
        }
        net.params()
            .into_iter()
            .flat_map(|(_, p)| p.value.as_slice().to_vec())
            .collect::<Vec<f32>>()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn conv_grid_matches_direct_convolution() {
    // Exhaustive over the small (k, s, p) grid, on an input each one tiles.
    for k in 1..=3 {
        for s in 1..=2 {
            for p in 0..=1 {
                if p >= k {
                    continue;
                }
                let h = (3 - 1) * s + k - 2 * p;
                let x = Tensor::from_fn(&[1, 2, h, h], |i| ((i * 31) % 7) as f64 - 3.0).unwrap();
                let w = Tensor::from_fn(&[2, 2, k, k], |i| ((i * 13) % 5) as f64 - 2.0).unwrap();
                let mut conv = Conv2d::from_weights(w.clone(), Tensor::zeros(&[2]).unwrap(), (s, s), (p, p)).unwrap();
                let y = conv.forward(&x).unwrap();
                assert_eq!(y.shape(), [1, 2, 3, 3], "k={k} s={s} p={p}");
                for f in 0..2 {
                    for oy in 0..3 {
                        for ox in 0..3 {
                            let mut acc = 0.0;
                            for c in 0..2 {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * s + ky) as isize - p as isize;
                                        let ix = (ox * s + kx) as isize - p as isize;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < h {
                                            acc += w.get(&[f, c, ky, kx]).unwrap()
                                                * x.get(&[0, c, iy as usize, ix as usize]).unwrap();
                                        }
                                    }
                                }
                            }
                            assert_eq!(y.get(&[0, f, oy, ox]).unwrap(), acc, "k={k} s={s} p={p}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn finetune_multiplier_scales_the_update() {
    use wsnn_core::optim::make_finetune_groups;
    let build = || {
        let mut net: Sequential<f64> = Sequential::new();
        net.push("fc1", Linear::new(3, 3).unwrap()).unwrap();
        net.push("fc2", Linear::new(3, 2).unwrap()).unwrap();
        net.init_params(InitScheme::FanInSqrt, &mut ChaCha8Rng::seed_from_u64(9));
        net
    };
    let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.5).unwrap();
    let step = |net: &mut Sequential<f64>, mult: wsnn_core::optim::LrMultipliers| {
        let before: Vec<f64> = net.params()[0].1.value.as_slice().to_vec();
        let y = net.forward(&x).unwrap();
        let loss = cross_entropy(&y, &[0, 1]).unwrap();
        net.zero_grad();
        net.backward(&loss.grad).unwrap();
        let mut opt = Optimizer::new(OptimConfig::sgd(0.5)).unwrap().with_multipliers(mult);
        opt.step(net).unwrap();
        let after = net.params()[0].1.value.as_slice().to_vec();
        before.iter().zip(&after).map(|(b, a)| a - b).collect::<Vec<f64>>()
    };
    let mut full = build();
    let d_full = step(&mut full, Default::default());
    let mut tuned = build();
    let mult = make_finetune_groups(
        &mut tuned,
        &[],
        0.1,
        InitScheme::FanInSqrt,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let d_tuned = step(&mut tuned, mult);
    assert!(d_full.iter().any(|d| d.abs() > 1e-6));
    for (f, t) in d_full.iter().zip(&d_tuned) {
        assert!((t - 0.1 * f).abs() <= 1e-12 * f.abs().max(1.0), "{t} vs 0.1*{f}");
    }
}
