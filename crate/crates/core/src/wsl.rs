//! Aggregation heads that reduce a `B×C×h×w` class score map to `B×C` scores.
//!
//! [`MilMaxPool`] keeps the best-scoring region per class. [`WeldonPool`]
//! adds the mean of the `k` highest and the mean of the `k` lowest regions,
//! so negative evidence also counts.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::nn::{impl_any, Layer};
use crate::tensor::{Element, Tensor};

fn map_dims(op: &str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects a B×C×h×w score map"),
        });
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

/// Spatial maximum per class, plus the flat spatial index of the first maximum.
pub fn mil_max_pool<T: Element>(z: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, n) = map_dims("mil_max_pool", z.shape())?;
    let mut values = Vec::with_capacity(b * c);
    let mut argmax = Vec::with_capacity(b * c);
    for region in z.as_slice().chunks_exact(n) {
        let mut best = 0;
        for (i, &v) in region.iter().enumerate().skip(1) {
            if v > region[best] {
                best = i;
            }
        }
        values.push(region[best]);
        argmax.push(best);
    }
    Ok((Tensor::from_vec(&[b, c], values)?, argmax))
}

/// Regions chosen by WELDON for one class: `k` top then `k` bottom, as flat
/// spatial indices.
fn weldon_select<T: Element>(region: &[T], k: usize, order: &mut Vec<usize>, out: &mut Vec<usize>) {
    order.clear();
    order.extend(0..region.len());
    // Highest first; equal scores keep row-major order.
    let desc = |&a: &usize, &b: &usize| {
        region[b]
            .partial_cmp(&region[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    order.sort_by(desc);
    out.extend_from_slice(&order[..k]);
    // Lowest among the remaining regions; equal scores again keep row-major order.
    let rest = &mut order[k..];
    rest.sort_by(|&a, &b| {
        region[a]
            .partial_cmp(&region[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    out.extend_from_slice(&rest[..k]);
}

/// `(1/k)·Σ top-k + (1/k)·Σ bottom-k` per class. Returns the scores and, per
/// `(b, c)`, the `2k` selected flat spatial indices (top first).
pub fn weldon_pool<T: Element>(z: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, n) = map_dims("weldon_pool", z.shape())?;
    if k == 0 || 2 * k > n {
        return Err(Error::Config(format!(
            "weldon_pool: k={k} needs 1 <= 2k <= {n} regions"
        )));
    }
    let inv_k = T::lit(1.0 / k as f64);
    let mut values = Vec::with_capacity(b * c);
    let mut selected = Vec::with_capacity(b * c * 2 * k);
    let mut order = Vec::with_capacity(n);
    for region in z.as_slice().chunks_exact(n) {
        let start = selected.len();
        weldon_select(region, k, &mut order, &mut selected);
        let (top, bottom) = selected[start..].split_at(k);
        let hi: T = top.iter().map(|&i| region[i]).sum();
        let lo: T = bottom.iter().map(|&i| region[i]).sum();
        values.push(hi * inv_k + lo * inv_k);
    }
    Ok((Tensor::from_vec(&[b, c], values)?, selected))
}

fn scatter<T: Element>(
    input_shape: &[usize],
    dy: &Tensor<T>,
    per_class: usize,
    picks: &[usize],
    weight: T,
) -> Result<Tensor<T>> {
    let (b, c, n) = map_dims("wsl backward", input_shape)?;
    if dy.shape() != [b, c] {
        return Err(Error::Shape {
            op: "wsl backward",
            lhs: dy.shape().to_vec(),
            rhs: vec![b, c],
        });
    }
    let mut dx = Tensor::zeros(input_shape)?;
    let out = dx.as_mut_slice();
    for (bc, &g) in dy.as_slice().iter().enumerate() {
        for &i in &picks[bc * per_class..(bc + 1) * per_class] {
            out[bc * n + i] = out[bc * n + i] + g * weight;
        }
    }
    Ok(dx)
}

/// Layer form of [`mil_max_pool`].
#[derive(Clone, Debug, Default)]
pub struct MilMaxPool {
    input_shape: Option<Vec<usize>>,
    argmax: Vec<usize>,
}

impl MilMaxPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flat spatial argmax per `(b, c)` from the last forward.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

impl<T: Element> Layer<T> for MilMaxPool {
    fn kind(&self) -> &'static str {
        "mil_max_pool"
    }

    fn forward(&mut self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, argmax) = mil_max_pool(z)?;
        self.input_shape = Some(z.shape().to_vec());
        self.argmax = argmax;
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or(Error::BackwardBeforeForward { layer: "mil_max_pool" })?;
        scatter(shape, dy, 1, &self.argmax, T::one())
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        map_dims("mil_max_pool", input)?;
        Ok(vec![input[0], input[1]])
    }

    impl_any!();
}

/// Layer form of [`weldon_pool`].
#[derive(Clone, Debug)]
pub struct WeldonPool {
    k: usize,
    input_shape: Option<Vec<usize>>,
    selected: Vec<usize>,
}

impl WeldonPool {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("weldon_pool: k must be positive".into()));
        }
        Ok(Self {
            k,
            input_shape: None,
            selected: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl<T: Element> Layer<T> for WeldonPool {
    fn kind(&self) -> &'static str {
        "weldon_pool"
    }

    fn forward(&mut self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, selected) = weldon_pool(z, self.k)?;
        self.input_shape = Some(z.shape().to_vec());
        self.selected = selected;
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or(Error::BackwardBeforeForward { layer: "weldon_pool" })?;
        scatter(shape, dy, 2 * self.k, &self.selected, T::lit(1.0 / self.k as f64))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (_, _, n) = map_dims("weldon_pool", input)?;
        if 2 * self.k > n {
            return Err(Error::Config(format!(
                "weldon_pool: 2k={} exceeds {n} regions",
                2 * self.k
            )));
        }
        Ok(vec![input[0], input[1]])
    }

    impl_any!();
}
