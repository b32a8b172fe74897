//! Training criteria. Each returns the batch-mean loss and its gradient with
//! respect to the predictions.

use crate::error::{Error, Result};
use crate::nn::log_softmax_rows;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// Which criterion a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
    MultilabelEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "cross_entropy" | "nll" => Ok(Self::CrossEntropy),
            "multilabel" | "multilabel_entropy" => Ok(Self::MultilabelEntropy),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

fn batch_cols(op: &'static str, x: &Tensor<impl Element>) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{op} expects B×C predictions"),
        });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// `mean_b (1/n) Σ_i (x_i − y_i)²`.
pub fn mse<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<LossOutput<T>> {
    let (b, n) = batch_cols("mse", x)?;
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            op: "mse",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let scale = T::lit(1.0 / (n * b) as f64);
    let diff = x.sub(y)?;
    let value = diff.as_slice().iter().map(|&d| d * d).sum::<T>() * scale;
    let grad = diff.map(|d| (d + d) * scale);
    Ok(LossOutput { value, grad })
}

/// `mean_b −log softmax(x_b)[y_b]` on raw logits.
pub fn cross_entropy<T: Element>(x: &Tensor<T>, targets: &[usize]) -> Result<LossOutput<T>> {
    let (b, c) = batch_cols("cross_entropy", x)?;
    check_targets(targets, b, c)?;
    let logp = log_softmax_rows(x)?;
    nll_from_log_probs(&logp, targets)
}

/// Negative log-likelihood of log-probabilities, i.e. cross entropy for models
/// that already end in a log-softmax. The gradient is with respect to `logp`.
pub fn nll<T: Element>(logp: &Tensor<T>, targets: &[usize]) -> Result<LossOutput<T>> {
    let (b, c) = batch_cols("nll", logp)?;
    check_targets(targets, b, c)?;
    let inv_b = T::lit(1.0 / b as f64);
    let mut grad = logp.zeros_like();
    let mut value = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        value = value - logp.outer(i)[t];
        grad.outer_mut(i)[t] = -inv_b;
    }
    Ok(LossOutput {
        value: value * inv_b,
        grad,
    })
}

fn nll_from_log_probs<T: Element>(logp: &Tensor<T>, targets: &[usize]) -> Result<LossOutput<T>> {
    let b = logp.shape()[0];
    let inv_b = T::lit(1.0 / b as f64);
    let mut grad = logp.map(|l| l.exp() * inv_b);
    let mut value = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        value = value - logp.outer(i)[t];
        let g = &mut grad.outer_mut(i)[t];
        *g = *g - inv_b;
    }
    Ok(LossOutput {
        value: value * inv_b,
        grad,
    })
}

fn check_targets(targets: &[usize], b: usize, c: usize) -> Result<()> {
    if targets.len() != b {
        return Err(Error::Shape {
            op: "targets",
            lhs: vec![b],
            rhs: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::IndexOutOfRange {
            what: "class index",
            index: bad,
            size: c,
        });
    }
    Ok(())
}

/// `softplus(z) = ln(1 + e^z)` without overflow.
fn softplus<T: Element>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// One-versus-all logistic loss per class, summed over classes and averaged
/// over the batch. Targets must be 0 or 1.
pub fn multilabel_entropy<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<LossOutput<T>> {
    let (b, _) = batch_cols("multilabel_entropy", x)?;
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            op: "multilabel_entropy",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if y.as_slice().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidArgument("multilabel targets must be 0 or 1".into()));
    }
    let inv_b = T::lit(1.0 / b as f64);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(x.len());
    for (&xi, &yi) in x.as_slice().iter().zip(y.as_slice()) {
        value = value + yi * softplus(-xi) + (T::one() - yi) * softplus(xi);
        grad.push((crate::tensor::sigmoid(xi) - yi) * inv_b);
    }
    Ok(LossOutput {
        value: value * inv_b,
        grad: Tensor::from_vec(x.shape(), grad)?,
    })
}
