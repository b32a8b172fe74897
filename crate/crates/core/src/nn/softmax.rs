use super::{expect_rank, expect_shape, impl_any, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Row-wise `log(softmax(x))` of a `B×C` matrix via max subtraction.
pub fn log_softmax_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("log_softmax", x.shape(), 2)?;
    let c = x.shape()[1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.as_slice().chunks_exact(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    let out = Tensor::from_vec(x.shape(), out)?;
    out.check_finite("log_softmax")?;
    Ok(out)
}

/// Layer form of [`log_softmax_rows`].
#[derive(Clone, Debug, Default)]
pub struct LogSoftmax<T> {
    output: Option<Tensor<T>>,
}

impl<T: Element> LogSoftmax<T> {
    pub fn new() -> Self {
        Self { output: None }
    }
}

impl<T: Element> Layer<T> for LogSoftmax<T> {
    fn kind(&self) -> &'static str {
        "logsoftmax"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = log_softmax_rows(x)?;
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self
            .output
            .as_ref()
            .ok_or(Error::BackwardBeforeForward { layer: "logsoftmax" })?;
        expect_shape("logsoftmax backward", dy.shape(), y.shape())?;
        let c = y.shape()[1];
        let mut dx = Vec::with_capacity(y.len());
        for (yr, gr) in y.as_slice().chunks_exact(c).zip(dy.as_slice().chunks_exact(c)) {
            let total: T = gr.iter().copied().sum();
            dx.extend(yr.iter().zip(gr).map(|(&l, &g)| g - l.exp() * total));
        }
        Tensor::from_vec(y.shape(), dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("logsoftmax", input, 2)?;
        Ok(input.to_vec())
    }

    impl_any!();
}
