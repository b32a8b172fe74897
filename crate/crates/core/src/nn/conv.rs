use rand::RngCore;

use super::{expect_rank, expect_shape, impl_any, init_weight, Cache, InitScheme, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::{col2im_add_into, gemm, im2col_into, ConvGeometry, Element, MatMut, MatRef, Tensor};

/// Target number of GEMM columns per batched im2col chunk.
const CHUNK_COLS: usize = 4096;

/// 2D cross-correlation of `B×C×H×W` inputs with `K` filters plus per-filter bias.
///
/// Lowered to im2col + GEMM. Several images are lowered side by side into a
/// single column buffer so the GEMM stays wide on small feature maps.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `K×C×kh×kw`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    geometry: ConvGeometry,
    cache: Cache<T>,
    cols: Vec<T>,
}

impl<T: Element> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, geometry: ConvGeometry) -> Result<Self> {
        Ok(Self {
            weight: Param::new(Tensor::zeros(&[out_channels, in_channels, geometry.kh, geometry.kw])?),
            bias: Param::new(Tensor::zeros(&[out_channels])?),
            geometry,
            cache: Cache::default(),
            cols: Vec::new(),
        })
    }

    /// Square kernel shortcut.
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, ConvGeometry::new(kernel, stride, pad))
    }

    pub fn from_weights(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        if weight.rank() != 4 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let geometry = ConvGeometry {
            kh: weight.shape()[2],
            kw: weight.shape()[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        };
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            geometry,
            cache: Cache::default(),
            cols: Vec::new(),
        })
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        expect_rank("conv2d", shape, 4)?;
        if shape[1] != self.in_channels() {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: shape.to_vec(),
                rhs: self.weight.value.shape().to_vec(),
            });
        }
        self.geometry.output_size(shape[2], shape[3])
    }

    fn lower_chunk(&mut self, x: &Tensor<T>, start: usize, count: usize, cols_per_image: usize) {
        let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let rows = c * self.geometry.kh * self.geometry.kw;
        let ld = count * cols_per_image;
        self.cols.resize(rows * ld, T::zero());
        for j in 0..count {
            im2col_into(
                x.outer(start + j),
                c,
                h,
                w,
                &self.geometry,
                &mut self.cols,
                ld,
                j * cols_per_image,
            );
        }
    }
}

impl<T: Element> Layer<T> for Conv2d<T> {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (ho, wo) = self.check_input(x.shape())?;
        let b = x.shape()[0];
        let k = self.out_channels();
        let rows = self.in_channels() * self.geometry.kh * self.geometry.kw;
        let p = ho * wo;
        let per_chunk = (CHUNK_COLS / p).clamp(1, b);

        let mut y = vec![T::zero(); b * k * p];
        let mut out = Vec::new();
        let mut start = 0;
        while start < b {
            let count = per_chunk.min(b - start);
            let ld = count * p;
            self.lower_chunk(x, start, count, p);
            out.resize(k * ld, T::zero());
            gemm(
                k,
                rows,
                ld,
                T::one(),
                MatRef::rows(self.weight.value.as_slice(), rows),
                MatRef::rows(&self.cols, ld),
                T::zero(),
                MatMut::rows(&mut out, ld),
            );
            for j in 0..count {
                let img = &mut y[(start + j) * k * p..(start + j + 1) * k * p];
                for (ki, &bias) in self.bias.value.as_slice().iter().enumerate() {
                    let src = &out[ki * ld + j * p..ki * ld + (j + 1) * p];
                    for (d, &s) in img[ki * p..(ki + 1) * p].iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
            start += count;
        }
        self.cache.store(x);
        Tensor::from_vec(&[b, k, ho, wo], y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take("conv2d")?;
        let result = self.backward_with(&x, dy);
        self.cache.put(x);
        result
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (ho, wo) = self.check_input(input)?;
        Ok(vec![input[0], self.out_channels(), ho, wo])
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }

    fn init_params(&mut self, scheme: InitScheme, rng: &mut dyn RngCore) {
        let fan_in = self.in_channels() * self.geometry.kh * self.geometry.kw;
        init_weight(&mut self.weight.value, fan_in, scheme, rng);
        self.bias.value.as_mut_slice().iter_mut().for_each(|b| *b = T::zero());
    }

    impl_any!();
}

impl<T: Element> Conv2d<T> {
    fn backward_with(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (ho, wo) = self.check_input(x.shape())?;
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let k = self.out_channels();
        expect_shape("conv2d backward", dy.shape(), &[b, k, ho, wo])?;
        let rows = c * self.geometry.kh * self.geometry.kw;
        let p = ho * wo;
        let per_chunk = (CHUNK_COLS / p).clamp(1, b);

        let mut dx = vec![T::zero(); x.len()];
        let mut dy_chunk = Vec::new();
        let mut dcols = Vec::new();
        let mut start = 0;
        while start < b {
            let count = per_chunk.min(b - start);
            let ld = count * p;
            dy_chunk.resize(k * ld, T::zero());
            for j in 0..count {
                let img = dy.outer(start + j);
                for ki in 0..k {
                    dy_chunk[ki * ld + j * p..ki * ld + (j + 1) * p].copy_from_slice(&img[ki * p..(ki + 1) * p]);
                }
            }
            let db = self.bias.grad.as_mut_slice();
            for (ki, g) in db.iter_mut().enumerate() {
                *g = *g + dy_chunk[ki * ld..(ki + 1) * ld].iter().copied().sum();
            }
            self.lower_chunk(x, start, count, p);
            // dW += dY·colsᵀ
            gemm(
                k,
                ld,
                rows,
                T::one(),
                MatRef::rows(&dy_chunk, ld),
                MatRef::rows_t(&self.cols, ld),
                T::one(),
                MatMut::rows(self.weight.grad.as_mut_slice(), rows),
            );
            // dcols = Wᵀ·dY
            dcols.resize(rows * ld, T::zero());
            gemm(
                rows,
                k,
                ld,
                T::one(),
                MatRef::rows_t(self.weight.value.as_slice(), rows),
                MatRef::rows(&dy_chunk, ld),
                T::zero(),
                MatMut::rows(&mut dcols, ld),
            );
            for j in 0..count {
                let img = &mut dx[(start + j) * c * h * w..(start + j + 1) * c * h * w];
                col2im_add_into(&dcols, ld, j * p, c, h, w, &self.geometry, img);
            }
            start += count;
        }
        Tensor::from_vec(x.shape(), dx)
    }
}
