use rand::RngCore;

use super::{impl_any, InitScheme, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Ordered chain of named layers.
///
/// Parameter names are qualified with the layer name (`conv1.weight`), and
/// nest when a `Sequential` sits inside another layer.
pub struct Sequential<T: Element> {
    layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Element> Default for Sequential<T> {
    fn default() -> Self {
        Self { layers: Vec::new() }
    }
}

impl<T: Element> std::fmt::Debug for Sequential<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.layers.iter().map(|(n, l)| format!("{n}: {}", l.kind())))
            .finish()
    }
}

impl<T: Element> Sequential<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a layer; names must be unique and free of dots.
    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer<T>) -> Result<&mut Self> {
        self.push_boxed(name.into(), Box::new(layer))
    }

    pub fn push_boxed(&mut self, name: String, layer: Box<dyn Layer<T>>) -> Result<&mut Self> {
        if name.is_empty() || name.contains('.') {
            return Err(Error::InvalidArgument(format!("invalid layer name '{name}'")));
        }
        if self.layers.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidArgument(format!("duplicate layer name '{name}'")));
        }
        self.layers.push((name, layer));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &dyn Layer<T>)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l.as_ref()))
    }

    pub fn layer(&self, name: &str) -> Option<&dyn Layer<T>> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, l)| l.as_ref())
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut (dyn Layer<T> + 'static)> {
        self.layers.iter_mut().find(|(n, _)| n == name).map(|(_, l)| l.as_mut())
    }

    pub fn last_mut(&mut self) -> Option<&mut (dyn Layer<T> + 'static)> {
        self.layers.last_mut().map(|(_, l)| l.as_mut())
    }

    pub fn into_layers(self) -> Vec<(String, Box<dyn Layer<T>>)> {
        self.layers
    }

    /// Runs the first `count` layers.
    pub fn forward_prefix(&mut self, x: &Tensor<T>, count: usize) -> Result<Tensor<T>> {
        let mut iter = self.layers.iter_mut().take(count);
        let Some((_, first)) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x)?;
        h.check_finite(first.kind())?;
        for (_, layer) in iter {
            h = layer.forward(&h)?;
            h.check_finite(layer.kind())?;
        }
        Ok(h)
    }

    /// Backpropagates through the first `count` layers, last to first.
    pub fn backward_prefix(&mut self, dy: &Tensor<T>, count: usize) -> Result<Tensor<T>> {
        let mut g = dy.clone();
        for (_, layer) in self.layers.iter_mut().take(count).rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Copies parameter and buffer values from `other` where names and shapes agree.
    /// Returns the names that were copied.
    pub fn copy_state_from(&mut self, other: &Sequential<T>) -> Vec<String> {
        let src_params = other.params();
        let src_buffers = other.buffers();
        let mut copied = Vec::new();
        for (name, p) in self.params_mut() {
            if let Some((_, s)) = src_params.iter().find(|(n, _)| *n == name) {
                if s.value.shape() == p.value.shape() {
                    p.value = s.value.clone();
                    copied.push(name);
                }
            }
        }
        for (name, b) in self.buffers_mut() {
            if let Some((_, s)) = src_buffers.iter().find(|(n, _)| *n == name) {
                if s.shape() == b.shape() {
                    *b = (*s).clone();
                    copied.push(name);
                }
            }
        }
        copied
    }
}

fn qualify(prefix: &str, name: String) -> String {
    format!("{prefix}.{name}")
}

impl<T: Element> Layer<T> for Sequential<T> {
    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.layers.len();
        self.forward_prefix(x, n)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.layers.len();
        self.backward_prefix(dy, n)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (_, l) in &self.layers {
            shape = l.output_shape(&shape)?;
        }
        Ok(shape)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .flat_map(|(ln, l)| l.params().into_iter().map(move |(n, p)| (qualify(ln, n), p)))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|(ln, l)| {
                let ln = ln.clone();
                l.params_mut().into_iter().map(move |(n, p)| (qualify(&ln, n), p))
            })
            .collect()
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|(ln, l)| l.buffers().into_iter().map(move |(n, b)| (qualify(ln, n), b)))
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|(ln, l)| {
                let ln = ln.clone();
                l.buffers_mut().into_iter().map(move |(n, b)| (qualify(&ln, n), b))
            })
            .collect()
    }

    fn set_training(&mut self, training: bool) {
        for (_, l) in &mut self.layers {
            l.set_training(training);
        }
    }

    fn init_params(&mut self, scheme: InitScheme, rng: &mut dyn RngCore) {
        for (_, l) in &mut self.layers {
            l.init_params(scheme, rng);
        }
    }

    fn zero_grad(&mut self) {
        for (_, l) in &mut self.layers {
            l.zero_grad();
        }
    }

    impl_any!();
}
