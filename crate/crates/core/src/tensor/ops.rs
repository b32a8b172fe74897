use super::{gemm, Element, MatMut, MatRef, Tensor};
use crate::error::{Error, Result};

/// Pointwise unary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Exp,
    Ln,
    Sqrt,
    Square,
    Relu,
    Sigmoid,
    Tanh,
}

/// Pointwise binary operations between equally shaped tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl UnaryOp {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Relu => x.max(T::zero()),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
        }
    }
}

impl BinaryOp {
    pub fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Max => a.max(b),
            BinaryOp::Min => a.min(b),
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Tensor::reduce_max_with_index`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaxWithIndex<T> {
    pub values: Tensor<T>,
    /// Flat row-major index into the *input* tensor of each maximum.
    pub indices: Vec<usize>,
}

impl<T: Element> Tensor<T> {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            MatRef::rows(&self.data, k),
            MatRef::rows(&rhs.data, n),
            T::zero(),
            MatMut::rows(&mut out, n),
        );
        let out = Tensor::from_parts_unchecked(vec![m, n], out);
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose2d needs a matrix".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts_unchecked(vec![c, r], out))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_parts_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor<T>> {
        let out = self.map(|v| op.apply(v));
        out.check_finite("unary")?;
        Ok(out)
    }

    pub fn binary(&self, rhs: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(Error::Shape {
                op: "elementwise",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| op.apply(a, b)).collect();
        let out = Tensor::from_parts_unchecked(self.shape.clone(), data);
        out.check_finite("elementwise")?;
        Ok(out)
    }

    /// Applies `op` with a scalar right-hand side.
    pub fn binary_scalar(&self, rhs: T, op: BinaryOp) -> Result<Tensor<T>> {
        let out = self.map(|a| op.apply(a, rhs));
        out.check_finite("elementwise")?;
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinaryOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinaryOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinaryOp::Mul)
    }

    pub fn scale(&self, s: T) -> Result<Tensor<T>> {
        self.binary_scalar(s, BinaryOp::Mul)
    }

    /// `self += alpha * rhs`, in place.
    pub fn axpy(&mut self, alpha: T, rhs: &Tensor<T>) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::Shape {
                op: "axpy",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    /// Maximum over `axes` together with the flat input index of the first
    /// maximum in row-major scan order.
    pub fn reduce_max_with_index(&self, axes: &[usize]) -> Result<MaxWithIndex<T>> {
        if axes.is_empty() || self.data.is_empty() {
            return Err(Error::EmptyReduction("reduce_max_with_index"));
        }
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank || reduced[a] {
                return Err(Error::InvalidAxis { axis: a, rank });
            }
            reduced[a] = true;
        }
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| self.shape[a]).collect();
        let n_out: usize = kept.iter().product();

        let mut values = vec![T::neg_infinity(); n_out];
        let mut indices = vec![usize::MAX; n_out];
        let mut idx = vec![0usize; rank];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut out = 0;
            for a in 0..rank {
                if !reduced[a] {
                    out = out * self.shape[a] + idx[a];
                }
            }
            if indices[out] == usize::MAX || v > values[out] {
                values[out] = v;
                indices[out] = flat;
            }
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < self.shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(MaxWithIndex {
            values: Tensor::from_parts_unchecked(kept, values),
            indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.as_slice()[i * k + p] * b.as_slice()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);

        let a = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_over_seeds() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[5, 7], &mut rng);
            let b = random(&[7, 3], &mut rng);
            let fast = a.matmul(&b).unwrap();
            for (x, y) in fast.as_slice().iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-12) + 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn reduce_max_examples() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reduce_max_with_index(&[0, 1]).unwrap();
        assert_eq!(r.values.as_slice(), &[4.0]);
        assert_eq!(r.indices, vec![3]);

        let t = Tensor::from_vec(&[1, 2], vec![5.0, 5.0]).unwrap();
        let r = t.reduce_max_with_index(&[0, 1]).unwrap();
        assert_eq!(r.values.as_slice(), &[5.0]);
        assert_eq!(r.indices, vec![0]);

        assert!(matches!(t.reduce_max_with_index(&[]), Err(Error::EmptyReduction(_))));
        assert!(matches!(t.reduce_max_with_index(&[2]), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn reduce_max_partial_axes_vs_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&[4, 6], &mut rng);
        let r = t.reduce_max_with_index(&[1]).unwrap();
        for row in 0..4 {
            let slice = &t.as_slice()[row * 6..row * 6 + 6];
            let (mut best, mut at) = (slice[0], 0);
            for (j, &v) in slice.iter().enumerate() {
                if v > best {
                    best = v;
                    at = j;
                }
            }
            assert_eq!(r.values.as_slice()[row], best);
            assert_eq!(r.indices[row], row * 6 + at);
        }
    }

    #[test]
    fn elementwise_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        let y = random(&[3, 4], &mut rng);
        assert_eq!(x.binary_scalar(0.0, BinaryOp::Add).unwrap(), x);
        assert_eq!(x.binary_scalar(1.0, BinaryOp::Mul).unwrap(), x);
        let back = x.sub(&y).unwrap().add(&y).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
        let z = Tensor::<f64>::zeros(&[4, 3]).unwrap();
        assert!(matches!(x.add(&z), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let x = Tensor::from_vec(&[2], vec![0.0f64, 1.0]).unwrap();
        assert!(matches!(x.unary(UnaryOp::Ln), Err(Error::NonFinite(_))));
        assert!(matches!(x.binary_scalar(0.0, BinaryOp::Div), Err(Error::NonFinite(_))));
    }
}
