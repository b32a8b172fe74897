use super::{expect_rank, expect_shape, impl_any, Layer};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Element, Tensor};

/// Max pooling over spatial windows. Padding positions never win.
///
/// Backward routes each window's whole upstream gradient to the first
/// maximum in row-major window order.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    geometry: ConvGeometry,
    input_shape: Option<Vec<usize>>,
    /// Flat input index of the winner of each output element.
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(geometry: ConvGeometry) -> Self {
        Self {
            geometry,
            input_shape: None,
            argmax: Vec::new(),
        }
    }

    /// `k×k` window with stride `k`.
    pub fn square(k: usize) -> Self {
        Self::new(ConvGeometry::new(k, k, 0))
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }
}

fn pooled_shape(op: &str, g: &ConvGeometry, input: &[usize]) -> Result<Vec<usize>> {
    expect_rank(op, input, 4)?;
    if g.ph >= g.kh || g.pw >= g.kw {
        return Err(Error::Geometry(format!(
            "{op}: padding must be smaller than the window"
        )));
    }
    let (ho, wo) = g.output_size(input[2], input[3])?;
    Ok(vec![input[0], input[1], ho, wo])
}

impl<T: Element> Layer<T> for MaxPool2d {
    fn kind(&self) -> &'static str {
        "maxpool2d"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = pooled_shape("maxpool2d", &self.geometry, x.shape())?;
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let g = self.geometry;
        let planes = out_shape[0] * out_shape[1];
        let mut y = Vec::with_capacity(planes * ho * wo);
        self.argmax.clear();
        self.argmax.reserve(planes * ho * wo);
        let src = x.as_slice();
        for plane in 0..planes {
            let base = plane * h * w;
            for oy in 0..ho {
                let y0 = (oy * g.sh) as isize - g.ph as isize;
                for ox in 0..wo {
                    let x0 = (ox * g.sw) as isize - g.pw as isize;
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for ky in 0..g.kh as isize {
                        let iy = y0 + ky;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..g.kw as isize {
                            let ix = x0 + kx;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if at == usize::MAX || src[i] > best {
                                best = src[i];
                                at = i;
                            }
                        }
                    }
                    y.push(best);
                    self.argmax.push(at);
                }
            }
        }
        self.input_shape = Some(x.shape().to_vec());
        Tensor::from_vec(&out_shape, y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or(Error::BackwardBeforeForward { layer: "maxpool2d" })?;
        let out_shape = pooled_shape("maxpool2d", &self.geometry, shape)?;
        expect_shape("maxpool2d backward", dy.shape(), &out_shape)?;
        let mut dx = Tensor::zeros(shape)?;
        let d = dx.as_mut_slice();
        for (&i, &g) in self.argmax.iter().zip(dy.as_slice()) {
            d[i] = d[i] + g;
        }
        Ok(dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        pooled_shape("maxpool2d", &self.geometry, input)
    }

    impl_any!();
}

/// Mean pooling over spatial windows; padded positions count as zeros.
#[derive(Clone, Debug)]
pub struct AvgPool2d {
    geometry: ConvGeometry,
    input_shape: Option<Vec<usize>>,
}

impl AvgPool2d {
    pub fn new(geometry: ConvGeometry) -> Self {
        Self {
            geometry,
            input_shape: None,
        }
    }

    pub fn square(k: usize) -> Self {
        Self::new(ConvGeometry::new(k, k, 0))
    }

    fn for_each_tap(&self, h: usize, w: usize, ho: usize, wo: usize, mut f: impl FnMut(usize, usize)) {
        let g = self.geometry;
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..g.kh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < w as isize {
                            f(oy * wo + ox, iy as usize * w + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Layer<T> for AvgPool2d {
    fn kind(&self) -> &'static str {
        "avgpool2d"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = pooled_shape("avgpool2d", &self.geometry, x.shape())?;
        let (h, w, ho, wo) = (x.shape()[2], x.shape()[3], out_shape[2], out_shape[3]);
        let norm = T::one() / T::lit((self.geometry.kh * self.geometry.kw) as f64);
        let mut y = Tensor::zeros(&out_shape)?;
        let planes = out_shape[0] * out_shape[1];
        for plane in 0..planes {
            let src = &x.as_slice()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut y.as_mut_slice()[plane * ho * wo..(plane + 1) * ho * wo];
            self.for_each_tap(h, w, ho, wo, |o, i| dst[o] = dst[o] + src[i]);
            dst.iter_mut().for_each(|v| *v = *v * norm);
        }
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .clone()
            .ok_or(Error::BackwardBeforeForward { layer: "avgpool2d" })?;
        let out_shape = pooled_shape("avgpool2d", &self.geometry, &shape)?;
        expect_shape("avgpool2d backward", dy.shape(), &out_shape)?;
        let (h, w, ho, wo) = (shape[2], shape[3], out_shape[2], out_shape[3]);
        let norm = T::one() / T::lit((self.geometry.kh * self.geometry.kw) as f64);
        let mut dx = Tensor::zeros(&shape)?;
        for plane in 0..shape[0] * shape[1] {
            let g = &dy.as_slice()[plane * ho * wo..(plane + 1) * ho * wo];
            let dst = &mut dx.as_mut_slice()[plane * h * w..(plane + 1) * h * w];
            self.for_each_tap(h, w, ho, wo, |o, i| dst[i] = dst[i] + g[o] * norm);
        }
        Ok(dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        pooled_shape("avgpool2d", &self.geometry, input)
    }

    impl_any!();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_of_single_window() {
        let mut p = MaxPool2d::square(2);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y: Tensor<f64> = p.forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[4.0]);
    }

    #[test]
    fn constant_input_routes_to_first_element() {
        let mut p = MaxPool2d::square(2);
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 3.0).unwrap();
        let y = p.forward(&x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 3.0));
        let dx = p.backward(&Tensor::<f64>::ones(y.shape()).unwrap()).unwrap();
        let mut expected = vec![0.0; 16];
        for i in [0, 2, 8, 10] {
            expected[i] = 1.0;
        }
        assert_eq!(dx.as_slice(), expected.as_slice());
    }

    #[test]
    fn maxpool_vs_scan_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[1, 1, 6, 6], |_| rng.random_range(-1.0..1.0)).unwrap();
        let mut p = MaxPool2d::square(3);
        let y: Tensor<f64> = p.forward(&x).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..3 {
                    for kx in 0..3 {
                        best = best.max(x.get(&[0, 0, oy * 3 + ky, ox * 3 + kx]).unwrap());
                    }
                }
                assert_eq!(y.get(&[0, 0, oy, ox]).unwrap(), best);
            }
        }
        let r = gradient_check(&mut p, &x, 1e-5, 1).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn avgpool_examples() {
        let mut p = AvgPool2d::square(2);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y: Tensor<f64> = p.forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[4.0]);

        let c = Tensor::<f64>::full(&[2, 3, 4, 4], -1.5).unwrap();
        let y = p.forward(&c).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn avgpool_vs_mean_oracle_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[2, 2, 6, 4], |_| rng.random_range(-1.0..1.0)).unwrap();
        let mut p = AvgPool2d::new(ConvGeometry::new(2, 2, 0));
        let y: Tensor<f64> = p.forward(&x).unwrap();
        let m = (x.get(&[1, 1, 2, 2]).unwrap()
            + x.get(&[1, 1, 2, 3]).unwrap()
            + x.get(&[1, 1, 3, 2]).unwrap()
            + x.get(&[1, 1, 3, 3]).unwrap())
            / 4.0;
        assert!((y.get(&[1, 1, 1, 1]).unwrap() - m).abs() < 1e-12);
        let r = gradient_check(&mut p, &x, 1e-5, 2).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
