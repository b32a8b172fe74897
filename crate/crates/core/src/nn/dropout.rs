use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expect_shape, impl_any, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Inverted dropout: survivors are scaled by `1/(1−p)` at train time so
/// evaluation is the identity.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    rate: f64,
    training: bool,
    rng: ChaCha8Rng,
    /// Per-element multiplier (0 or 1/(1−p)) from the last train-mode forward.
    mask: Option<Tensor<T>>,
    frozen: bool,
}

impl<T: Element> Dropout<T> {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self {
            rate,
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
            frozen: false,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Reuse the current mask on subsequent forwards (finite-difference checks).
    pub fn freeze_mask(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

impl<T: Element> Layer<T> for Dropout<T> {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.training || self.rate == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let reuse = self.frozen && self.mask.as_ref().is_some_and(|m| m.shape() == x.shape());
        if !reuse {
            let keep = T::lit(1.0 / (1.0 - self.rate));
            let rate = self.rate;
            let rng = &mut self.rng;
            self.mask = Some(Tensor::from_fn(x.shape(), |_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })?);
        }
        let mask = self.mask.as_ref().expect("mask drawn above");
        x.mul(mask)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.mask {
            Some(mask) => {
                expect_shape("dropout backward", dy.shape(), mask.shape())?;
                dy.mul(mask)
            }
            None => Ok(dy.clone()),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    impl_any!();
}
