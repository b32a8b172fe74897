use rand::RngCore;

use super::{expect_rank, expect_shape, impl_any, InitScheme, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization of `B×C×H×W` activations.
///
/// Training normalizes with batch statistics over `(B, H, W)` and folds them
/// into running estimates (`running ← (1−m)·running + m·batch`, unbiased
/// variance). Evaluation uses the running estimates, which start at mean 0
/// and variance 1.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    eps: f64,
    momentum: f64,
    training: bool,
    // normalized input and per-channel 1/sqrt(var+eps) from the last forward
    x_hat: Option<Tensor<T>>,
    inv_std: Vec<T>,
    used_batch_stats: bool,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Param::new(Tensor::ones(&[channels])?),
            beta: Param::new(Tensor::zeros(&[channels])?),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            training: true,
            x_hat: None,
            inv_std: Vec::new(),
            used_batch_stats: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl<T: Element> Layer<T> for BatchNorm2d<T> {
    fn kind(&self) -> &'static str {
        "batchnorm2d"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("batchnorm2d", x.shape(), 4)?;
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != self.channels() {
            return Err(Error::Shape {
                op: "batchnorm2d",
                lhs: x.shape().to_vec(),
                rhs: vec![self.channels()],
            });
        }
        let hw = h * w;
        let n = b * hw;
        if self.training && n < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm2d: training needs at least 2 values per channel".into(),
            ));
        }
        let src = x.as_slice();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        self.inv_std.clear();
        for ch in 0..c {
            let (mean, inv_std) = if self.training {
                let mut sum = 0.0f64;
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    sum += src[off..off + hw]
                        .iter()
                        .map(|v| v.to_f64().unwrap_or(0.0))
                        .sum::<f64>();
                }
                let mean = sum / n as f64;
                let mut sq = 0.0f64;
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    sq += src[off..off + hw]
                        .iter()
                        .map(|v| (v.to_f64().unwrap_or(0.0) - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / n as f64;
                let m = self.momentum;
                let rm = &mut self.running_mean.as_mut_slice()[ch];
                *rm = T::lit((1.0 - m) * rm.to_f64().unwrap_or(0.0) + m * mean);
                let rv = &mut self.running_var.as_mut_slice()[ch];
                let unbiased = sq / (n - 1) as f64;
                *rv = T::lit((1.0 - m) * rv.to_f64().unwrap_or(1.0) + m * unbiased);
                (T::lit(mean), T::lit(1.0 / (var + self.eps).sqrt()))
            } else {
                let mean = self.running_mean.as_slice()[ch];
                let var = self.running_var.as_slice()[ch];
                (mean, T::one() / (var + T::lit(self.eps)).sqrt())
            };
            self.inv_std.push(inv_std);
            let (g, bt) = (self.gamma.value.as_slice()[ch], self.beta.value.as_slice()[ch]);
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (src[i] - mean) * inv_std;
                    x_hat[i] = xh;
                    y[i] = g * xh + bt;
                }
            }
        }
        self.used_batch_stats = self.training;
        self.x_hat = Some(Tensor::from_vec(x.shape(), x_hat)?);
        Tensor::from_vec(x.shape(), y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x_hat = self
            .x_hat
            .as_ref()
            .ok_or(Error::BackwardBeforeForward { layer: "batchnorm2d" })?;
        expect_shape("batchnorm2d backward", dy.shape(), x_hat.shape())?;
        let s = x_hat.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let n = T::lit((b * hw) as f64);
        let (xh, g) = (x_hat.as_slice(), dy.as_slice());
        let mut dx = vec![T::zero(); dy.len()];
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    sum_dy = sum_dy + g[i];
                    sum_dy_xh = sum_dy_xh + g[i] * xh[i];
                }
            }
            let gm = &mut self.gamma.grad.as_mut_slice()[ch];
            *gm = *gm + sum_dy_xh;
            let bg = &mut self.beta.grad.as_mut_slice()[ch];
            *bg = *bg + sum_dy;

            let scale = self.gamma.value.as_slice()[ch] * self.inv_std[ch];
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    dx[i] = if self.used_batch_stats {
                        scale * (g[i] - sum_dy / n - xh[i] * sum_dy_xh / n)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
        Tensor::from_vec(dy.shape(), dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("batchnorm2d", input, 4)?;
        Ok(input.to_vec())
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }

    fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    fn init_params(&mut self, _scheme: InitScheme, _rng: &mut dyn RngCore) {
        self.gamma.value.as_mut_slice().iter_mut().for_each(|v| *v = T::one());
        self.beta.value.as_mut_slice().iter_mut().for_each(|v| *v = T::zero());
    }

    impl_any!();
}
