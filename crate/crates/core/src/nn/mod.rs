//! Differentiable layers with explicit layer-wise backpropagation.
//!
//! Every layer follows the same contract: `forward` caches whatever the
//! backward pass needs, `backward` consumes the gradient of the loss with
//! respect to the layer output, *accumulates* parameter gradients into
//! [`Param::grad`] and returns the gradient with respect to the input.
//! Gradients are cleared with [`Layer::zero_grad`].

mod activation;
mod batchnorm;
mod conv;
mod convert;
mod dropout;
mod gradcheck;
mod init;
mod linear;
mod pool;
mod reshape;
mod sequential;
mod softmax;

use std::any::Any;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use activation::{Activation, ActivationKind};
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use convert::fully_convolutionalize;
pub use dropout::Dropout;
pub use gradcheck::{gradient_check, rel_err, GradCheckReport};
pub use init::{init_weight, InitScheme};
pub use linear::Linear;
pub use pool::{AvgPool2d, MaxPool2d};
pub use reshape::Flatten;
pub use sequential::Sequential;
pub use softmax::{log_softmax_rows, LogSoftmax};

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = value.zeros_like();
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.as_mut_slice().iter_mut().for_each(|g| *g = T::zero());
    }
}

/// A differentiable unit.
pub trait Layer<T: Element>: Send + 'static {
    /// Short type name, e.g. `"conv2d"`.
    fn kind(&self) -> &'static str;

    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>>;

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>>;

    /// Shape produced by `forward` for an input of shape `input`.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn params(&self) -> Vec<(String, &Param<T>)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        Vec::new()
    }

    /// Non-learnable state that must be persisted (running statistics).
    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }

    fn set_training(&mut self, _training: bool) {}

    /// Re-draws learnable parameters; biases are reset to zero.
    fn init_params(&mut self, _scheme: InitScheme, _rng: &mut dyn RngCore) {}

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    fn as_any(&self) -> &dyn Any;

    fn as_any_mut(&mut self) -> &mut dyn Any;

    fn into_any(self: Box<Self>) -> Box<dyn Any>;
}

macro_rules! impl_any {
    () => {
        fn as_any(&self) -> &dyn std::any::Any {
            self
        }

        fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
            self
        }

        fn into_any(self: Box<Self>) -> Box<dyn std::any::Any> {
            self
        }
    };
}
pub(crate) use impl_any;

/// Cached forward input, with the standard misuse checks.
#[derive(Clone, Debug, Default)]
pub(crate) struct Cache<T> {
    input: Option<Tensor<T>>,
}

impl<T: Element> Cache<T> {
    pub(crate) fn store(&mut self, x: &Tensor<T>) {
        match &mut self.input {
            Some(t) if t.shape() == x.shape() => t.as_mut_slice().copy_from_slice(x.as_slice()),
            slot => *slot = Some(x.clone()),
        }
    }

    pub(crate) fn get(&self, layer: &'static str) -> Result<&Tensor<T>> {
        self.input.as_ref().ok_or(Error::BackwardBeforeForward { layer })
    }

    pub(crate) fn take(&mut self, layer: &'static str) -> Result<Tensor<T>> {
        self.input.take().ok_or(Error::BackwardBeforeForward { layer })
    }

    pub(crate) fn put(&mut self, x: Tensor<T>) {
        self.input = Some(x);
    }
}

/// Checks that an upstream gradient matches the shape of the forward output.
pub(crate) fn expect_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Shape {
            op,
            lhs: got.to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn expect_rank(op: &str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects a rank-{rank} input"),
        });
    }
    Ok(())
}
