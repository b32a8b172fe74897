//! Independent reference implementations, compared against the library on
//! randomly drawn instances. Each check returns the worst error it saw so the
//! caller decides the tolerance.
//!
//! Shared by the core integration tests and the harness acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsnn_core::nn::{AvgPool2d, Conv2d, Layer, Linear, MaxPool2d};
use wsnn_core::optim::{OptimConfig, Optimizer, OptimizerKind};
use wsnn_core::stn::affine_grid;
use wsnn_core::tensor::ConvGeometry;
use wsnn_core::wsl::{mil_max_pool, weldon_pool, MilMaxPool, WeldonPool};
use wsnn_core::Tensor;

pub const INSTANCES: usize = 100;

/// Tolerances, all on relative error with a unit floor (`|a-b| / max(1, |b|)`).
pub const CONV_TOL: f64 = 1e-10;
pub const POOL_TOL: f64 = 1e-12;
pub const WSL_TOL: f64 = 1e-12;
pub const GRID_TOL: f64 = 1e-12;
pub const ADAM_TOL: f64 = 1e-10;

fn err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn worst(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(&x, &y)| err(x, y)).fold(0.0, f64::max)
}

fn rng(check: u64, instance: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(check.wrapping_mul(1_000_003) + instance as u64)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0)).unwrap()
}

/// A geometry plus an input size that it tiles exactly.
fn random_geometry(r: &mut ChaCha8Rng, max_k: usize, allow_pad: bool) -> (ConvGeometry, usize, usize) {
    let kh = r.random_range(1..=max_k);
    let kw = r.random_range(1..=max_k);
    let sh = r.random_range(1..=2);
    let sw = r.random_range(1..=2);
    let ph = if allow_pad { r.random_range(0..kh) } else { 0 };
    let pw = if allow_pad { r.random_range(0..kw) } else { 0 };
    // Choose the output size first so the stride divides the span.
    let ho = r.random_range(1..=5);
    let wo = r.random_range(1..=5);
    let h = ((ho - 1) * sh + kh).saturating_sub(2 * ph).max(1);
    let w = ((wo - 1) * sw + kw).saturating_sub(2 * pw).max(1);
    let g = ConvGeometry { kh, kw, sh, sw, ph, pw };
    match g.output_size(h, w) {
        Ok(_) => (g, h, w),
        // Padding larger than the data can leave an inexact span; drop it.
        Err(_) => {
            let g = ConvGeometry { ph: 0, pw: 0, ..g };
            (g, (ho - 1) * sh + kh, (wo - 1) * sw + kw)
        }
    }
}

/// Value at `(y, x)` of a plane, zero outside.
fn padded(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> Option<f64> {
    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| plane[y as usize * w + x as usize])
}

/// Conv2d forward and backward against direct sliding-window loops.
pub fn conv_vs_loop(instances: usize) -> f64 {
    let mut max_err = 0.0f64;
    for inst in 0..instances {
        let mut r = rng(1, inst);
        let (g, h, w) = random_geometry(&mut r, 4, true);
        let (b, c, k) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4));
        let x = random_tensor(&mut r, &[b, c, h, w]);
        let wt = random_tensor(&mut r, &[k, c, g.kh, g.kw]);
        let bias = random_tensor(&mut r, &[k]);
        let mut conv = Conv2d::from_weights(wt.clone(), bias.clone(), (g.sh, g.sw), (g.ph, g.pw)).unwrap();
        let y = conv.forward(&x).unwrap();
        let (ho, wo) = g.output_size(h, w).unwrap();
        assert_eq!(y.shape(), [b, k, ho, wo]);
        let dy = random_tensor(&mut r, y.shape());
        conv.zero_grad();
        let dx = conv.backward(&dy).unwrap();

        let mut y_ref = vec![0.0; b * k * ho * wo];
        let mut dx_ref = vec![0.0; b * c * h * w];
        let mut dw_ref = vec![0.0; wt.len()];
        let mut db_ref = vec![0.0; k];
        let (xs, ws, dys) = (x.as_slice(), wt.as_slice(), dy.as_slice());
        for n in 0..b {
            for f in 0..k {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let o = ((n * k + f) * ho + oy) * wo + ox;
                        let mut acc = bias.as_slice()[f];
                        db_ref[f] += dys[o];
                        for ch in 0..c {
                            let plane = &xs[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                                    let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                                    if let Some(v) = padded(plane, h, w, iy, ix) {
                                        let wi = ((f * c + ch) * g.kh + ky) * g.kw + kx;
                                        acc += ws[wi] * v;
                                        dw_ref[wi] += dys[o] * v;
                                        dx_ref[(n * c + ch) * h * w + iy as usize * w + ix as usize] += dys[o] * ws[wi];
                                    }
                                }
                            }
                        }
                        y_ref[o] = acc;
                    }
                }
            }
        }
        let params = conv.params();
        max_err = max_err
            .max(worst(y.as_slice(), &y_ref))
            .max(worst(dx.as_slice(), &dx_ref))
            .max(worst(params[0].1.grad.as_slice(), &dw_ref))
            .max(worst(params[1].1.grad.as_slice(), &db_ref));
    }
    max_err
}

/// Max and average pooling against window scans. Max-pool gradients go to
/// the first maximum in row-major window order; average pooling divides by
/// the full window area, padding included.
pub fn pooling_vs_scan(instances: usize) -> f64 {
    let mut max_err = 0.0f64;
    for inst in 0..instances {
        let mut r = rng(2, inst);
        let (g, h, w) = random_geometry(&mut r, 3, true);
        let (b, c) = (r.random_range(1..=2), r.random_range(1..=3));
        // Coarse values so ties actually happen.
        let x = Tensor::from_fn(&[b, c, h, w], |_| r.random_range(-3i32..=3) as f64 * 0.5).unwrap();
        let (ho, wo) = g.output_size(h, w).unwrap();

        let mut max_ref = vec![0.0; b * c * ho * wo];
        let mut avg_ref = vec![0.0; b * c * ho * wo];
        let dy = random_tensor(&mut r, &[b, c, ho, wo]);
        let mut dmax_ref = vec![0.0; x.len()];
        let mut davg_ref = vec![0.0; x.len()];
        let area = (g.kh * g.kw) as f64;
        for plane in 0..b * c {
            let src = &x.as_slice()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (plane * ho + oy) * wo + ox;
                    let mut best: Option<(f64, usize)> = None;
                    let mut sum = 0.0;
                    let mut covered = Vec::new();
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                            let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                            if let Some(v) = padded(src, h, w, iy, ix) {
                                let at = plane * h * w + iy as usize * w + ix as usize;
                                sum += v;
                                covered.push(at);
                                if best.is_none_or(|(bv, _)| v > bv) {
                                    best = Some((v, at));
                                }
                            }
                        }
                    }
                    let (bv, at) = best.expect("window overlaps the input");
                    max_ref[o] = bv;
                    dmax_ref[at] += dy.as_slice()[o];
                    avg_ref[o] = sum / area;
                    for at in covered {
                        davg_ref[at] += dy.as_slice()[o] / area;
                    }
                }
            }
        }

        let mut mp = MaxPool2d::new(g);
        let y = Layer::<f64>::forward(&mut mp, &x).unwrap();
        let dx = Layer::<f64>::backward(&mut mp, &dy).unwrap();
        max_err = max_err
            .max(worst(y.as_slice(), &max_ref))
            .max(worst(dx.as_slice(), &dmax_ref));

        let mut ap = AvgPool2d::new(g);
        let y = Layer::<f64>::forward(&mut ap, &x).unwrap();
        let dx = Layer::<f64>::backward(&mut ap, &dy).unwrap();
        max_err = max_err
            .max(worst(y.as_slice(), &avg_ref))
            .max(worst(dx.as_slice(), &davg_ref));
    }
    max_err
}

/// WELDON and MIL heads against sorting every region score.
pub fn weldon_vs_sort(instances: usize) -> f64 {
    let mut max_err = 0.0f64;
    for inst in 0..instances {
        let mut r = rng(3, inst);
        let (b, c) = (r.random_range(1..=3), r.random_range(1..=4));
        let (h, w) = (r.random_range(1..=5), r.random_range(2..=5));
        let n = h * w;
        let k = r.random_range(1..=n / 2);
        let z = random_tensor(&mut r, &[b, c, h, w]);

        let mut weldon_ref = Vec::new();
        let mut max_ref = Vec::new();
        for region in z.as_slice().chunks(n) {
            let mut sorted = region.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let top: f64 = sorted[..k].iter().sum::<f64>() / k as f64;
            let bottom: f64 = sorted[n - k..].iter().sum::<f64>() / k as f64;
            weldon_ref.push(top + bottom);
            max_ref.push(sorted[0]);
        }
        let (s, _) = weldon_pool(&z, k).unwrap();
        let (m, _) = mil_max_pool(&z).unwrap();
        max_err = max_err
            .max(worst(s.as_slice(), &weldon_ref))
            .max(worst(m.as_slice(), &max_ref));

        // Continuous scores have no ties, so the layer gradient is 1/k on each
        // selected region and the max gradient lands on the unique argmax.
        let dy = random_tensor(&mut r, &[b, c]);
        let mut layer = WeldonPool::new(k).unwrap();
        Layer::<f64>::forward(&mut layer, &z).unwrap();
        let dz = Layer::<f64>::backward(&mut layer, &dy).unwrap();
        let mut mil = MilMaxPool::new();
        Layer::<f64>::forward(&mut mil, &z).unwrap();
        let dm = Layer::<f64>::backward(&mut mil, &dy).unwrap();
        let mut dz_ref = vec![0.0; z.len()];
        let mut dm_ref = vec![0.0; z.len()];
        for (bc, region) in z.as_slice().chunks(n).enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| region[b].total_cmp(&region[a]));
            for &i in order[..k].iter().chain(&order[n - k..]) {
                dz_ref[bc * n + i] += dy.as_slice()[bc] / k as f64;
            }
            dm_ref[bc * n + order[0]] += dy.as_slice()[bc];
        }
        max_err = max_err
            .max(worst(dz.as_slice(), &dz_ref))
            .max(worst(dm.as_slice(), &dm_ref));
    }
    max_err
}

/// Sampling grid against multiplying each target point by the 2×3 matrix.
pub fn affine_grid_vs_matmul(instances: usize) -> f64 {
    let mut max_err = 0.0f64;
    for inst in 0..instances {
        let mut r = rng(4, inst);
        let b = r.random_range(1..=3);
        let (ho, wo) = (r.random_range(1..=9), r.random_range(1..=9));
        let a = Tensor::from_fn(&[b, 2, 3], |_| r.random_range(-2.0..2.0)).unwrap();
        let grid = affine_grid(&a, ho, wo).unwrap();
        assert_eq!(grid.shape(), [b, ho, wo, 2]);
        let coord = |i: usize, n: usize| {
            if n == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (n - 1) as f64
            }
        };
        let mut expected = Vec::with_capacity(grid.len());
        for m in a.as_slice().chunks(6) {
            for i in 0..ho {
                for j in 0..wo {
                    let p = [coord(j, wo), coord(i, ho), 1.0];
                    for row in 0..2 {
                        expected.push((0..3).map(|col| m[row * 3 + col] * p[col]).sum());
                    }
                }
            }
        }
        max_err = max_err.max(worst(grid.as_slice(), &expected));
    }
    max_err
}

/// Scalar Adam: coupled weight decay, `lr/(1+decay·t)`, bias-corrected moments.
pub struct ScalarAdam {
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl ScalarAdam {
    pub fn new(n: usize, lr: f64, lr_decay: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            lr_decay,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], multiplier: f64) {
        let lr = self.lr / (1.0 + self.lr_decay * self.t as f64) * multiplier;
        self.t += 1;
        for i in 0..theta.len() {
            let g = grad[i] + 2.0 * self.weight_decay * theta[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(self.t as i32));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(self.t as i32));
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// The library optimizer against [`ScalarAdam`] over 50 steps of random gradients.
pub fn adam_vs_scalar(instances: usize) -> f64 {
    let mut max_err = 0.0f64;
    for inst in 0..instances {
        let mut r = rng(5, inst);
        let (fan_in, fan_out) = (r.random_range(1..=6), r.random_range(1..=4));
        let lr = r.random_range(1e-4..1e-1);
        let lr_decay = if r.random_bool(0.5) {
            r.random_range(0.0..0.1)
        } else {
            0.0
        };
        let wd = if r.random_bool(0.5) {
            r.random_range(0.0..0.01)
        } else {
            0.0
        };
        let mut layer = Linear::from_weights(
            random_tensor(&mut r, &[fan_out, fan_in]),
            random_tensor(&mut r, &[fan_out]),
        )
        .unwrap();
        let cfg = OptimConfig {
            kind: OptimizerKind::Adam,
            lr,
            lr_decay,
            weight_decay: wd,
            ..OptimConfig::default()
        };
        let mut opt = Optimizer::<f64>::new(cfg).unwrap();
        let mut w_ref = layer.params()[0].1.value.as_slice().to_vec();
        let mut b_ref = layer.params()[1].1.value.as_slice().to_vec();
        let mut adam_w = ScalarAdam::new(w_ref.len(), lr, lr_decay, wd);
        let mut adam_b = ScalarAdam::new(b_ref.len(), lr, lr_decay, wd);
        for _ in 0..50 {
            let gw: Vec<f64> = (0..w_ref.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let gb: Vec<f64> = (0..b_ref.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            {
                let mut params = layer.params_mut();
                params[0].1.grad.as_mut_slice().copy_from_slice(&gw);
                params[1].1.grad.as_mut_slice().copy_from_slice(&gb);
            }
            opt.step(&mut layer).unwrap();
            adam_w.step(&mut w_ref, &gw, 1.0);
            adam_b.step(&mut b_ref, &gb, 1.0);
        }
        let params = layer.params();
        max_err = max_err
            .max(worst(params[0].1.value.as_slice(), &w_ref))
            .max(worst(params[1].1.value.as_slice(), &b_ref));
    }
    max_err
}

/// One named oracle comparison.
pub struct OracleCheck {
    pub name: &'static str,
    pub run: fn(usize) -> f64,
    pub tolerance: f64,
}

pub fn all_checks() -> Vec<OracleCheck> {
    vec![
        OracleCheck {
            name: "conv2d vs sliding window",
            run: conv_vs_loop,
            tolerance: CONV_TOL,
        },
        OracleCheck {
            name: "pooling vs scan",
            run: pooling_vs_scan,
            tolerance: POOL_TOL,
        },
        OracleCheck {
            name: "weldon/mil vs full sort",
            run: weldon_vs_sort,
            tolerance: WSL_TOL,
        },
        OracleCheck {
            name: "affine_grid vs per-point matmul",
            run: affine_grid_vs_matmul,
            tolerance: GRID_TOL,
        },
        OracleCheck {
            name: "adam vs scalar reference",
            run: adam_vs_scalar,
            tolerance: ADAM_TOL,
        },
    ]
}
