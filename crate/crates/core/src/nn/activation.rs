use super::{expect_shape, impl_any, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, UnaryOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
}

/// Pointwise nonlinearity. Caches its output, from which every supported
/// derivative can be recovered.
#[derive(Clone, Debug)]
pub struct Activation<T> {
    kind: ActivationKind,
    output: Option<Tensor<T>>,
}

impl<T: Element> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, output: None }
    }

    pub fn relu() -> Self {
        Self::new(ActivationKind::Relu)
    }

    pub fn activation_kind(&self) -> ActivationKind {
        self.kind
    }
}

impl<T: Element> Layer<T> for Activation<T> {
    fn kind(&self) -> &'static str {
        match self.kind {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let op = match self.kind {
            ActivationKind::Relu => UnaryOp::Relu,
            ActivationKind::Sigmoid => UnaryOp::Sigmoid,
            ActivationKind::Tanh => UnaryOp::Tanh,
        };
        let y = x.map(|v| op.apply(v));
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self
            .output
            .as_ref()
            .ok_or(Error::BackwardBeforeForward { layer: "activation" })?;
        expect_shape("activation backward", dy.shape(), y.shape())?;
        let one = T::one();
        let dx: Vec<T> = match self.kind {
            ActivationKind::Relu => y
                .as_slice()
                .iter()
                .zip(dy.as_slice())
                .map(|(&o, &d)| if o > T::zero() { d } else { T::zero() })
                .collect(),
            ActivationKind::Sigmoid => y
                .as_slice()
                .iter()
                .zip(dy.as_slice())
                .map(|(&o, &d)| d * o * (one - o))
                .collect(),
            ActivationKind::Tanh => y
                .as_slice()
                .iter()
                .zip(dy.as_slice())
                .map(|(&o, &d)| d * (one - o * o))
                .collect(),
        };
        Tensor::from_vec(y.shape(), dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    impl_any!();
}
