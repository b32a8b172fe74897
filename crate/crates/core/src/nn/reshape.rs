use super::{impl_any, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Collapses all but the leading batch axis: `B×d1×…×dn → B×(d1·…·dn)`.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Element> Layer<T> for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = <Self as Layer<T>>::output_shape(self, x.shape())?;
        self.input_shape = Some(x.shape().to_vec());
        x.clone().reshape(&out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or(Error::BackwardBeforeForward { layer: "flatten" })?;
        dy.clone().reshape(shape)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.is_empty() {
            return Err(Error::InvalidShape {
                shape: input.to_vec(),
                reason: "flatten needs a batch axis".into(),
            });
        }
        Ok(vec![input[0], input[1..].iter().product()])
    }

    impl_any!();
}
