use rand::RngCore;

use super::{expect_rank, expect_shape, impl_any, init_weight, Cache, InitScheme, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatMut, MatRef, Tensor};

/// Fully-connected layer `y = x·Aᵀ + b` on `B×I` inputs.
///
/// The weight is stored `O×I`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Cache<T>,
}

impl<T: Element> Linear<T> {
    /// Zero-initialized layer; call [`Layer::init_params`] to draw weights.
    pub fn new(in_features: usize, out_features: usize) -> Result<Self> {
        Ok(Self {
            weight: Param::new(Tensor::zeros(&[out_features, in_features])?),
            bias: Param::new(Tensor::zeros(&[out_features])?),
            cache: Cache::default(),
        })
    }

    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Shape {
                op: "linear",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: Cache::default(),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl<T: Element> Layer<T> for Linear<T> {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("linear", x.shape(), 2)?;
        let (b, i, o) = (x.shape()[0], self.in_features(), self.out_features());
        if x.shape()[1] != i {
            return Err(Error::Shape {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: self.weight.value.shape().to_vec(),
            });
        }
        let mut y = Vec::with_capacity(b * o);
        for _ in 0..b {
            y.extend_from_slice(self.bias.value.as_slice());
        }
        gemm(
            b,
            i,
            o,
            T::one(),
            MatRef::rows(x.as_slice(), i),
            MatRef::rows_t(self.weight.value.as_slice(), i),
            T::one(),
            MatMut::rows(&mut y, o),
        );
        self.cache.store(x);
        Tensor::from_vec(&[b, o], y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.get("linear")?;
        let (b, i, o) = (x.shape()[0], self.in_features(), self.out_features());
        expect_shape("linear backward", dy.shape(), &[b, o])?;
        // dA += dyᵀ·x
        gemm(
            o,
            b,
            i,
            T::one(),
            MatRef::rows_t(dy.as_slice(), o),
            MatRef::rows(x.as_slice(), i),
            T::one(),
            MatMut::rows(self.weight.grad.as_mut_slice(), i),
        );
        let db = self.bias.grad.as_mut_slice();
        for row in dy.as_slice().chunks_exact(o) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        let mut dx = vec![T::zero(); b * i];
        gemm(
            b,
            o,
            i,
            T::one(),
            MatRef::rows(dy.as_slice(), o),
            MatRef::rows(self.weight.value.as_slice(), i),
            T::zero(),
            MatMut::rows(&mut dx, i),
        );
        Tensor::from_vec(&[b, i], dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 2 || input[1] != self.in_features() {
            return Err(Error::Shape {
                op: "linear",
                lhs: input.to_vec(),
                rhs: self.weight.value.shape().to_vec(),
            });
        }
        Ok(vec![input[0], self.out_features()])
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }

    fn init_params(&mut self, scheme: InitScheme, rng: &mut dyn RngCore) {
        let fan_in = self.in_features();
        init_weight(&mut self.weight.value, fan_in, scheme, rng);
        self.bias.value.as_mut_slice().iter_mut().for_each(|b| *b = T::zero());
    }

    impl_any!();
}
