use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Kernel size, stride and zero padding of a sliding-window operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kh: kernel,
            kw: kernel,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
        }
    }

    /// Output spatial size; the window must tile the padded input exactly.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            axis_len(h, self.kh, self.sh, self.ph, "height")?,
            axis_len(w, self.kw, self.sw, self.pw, "width")?,
        ))
    }
}

fn axis_len(n: usize, k: usize, s: usize, p: usize, axis: &str) -> Result<usize> {
    if k == 0 || s == 0 {
        return Err(Error::Geometry(format!("{axis}: kernel and stride must be positive")));
    }
    let padded = n + 2 * p;
    if padded < k {
        return Err(Error::Geometry(format!(
            "{axis}: kernel {k} larger than padded input {padded}"
        )));
    }
    if (padded - k) % s != 0 {
        return Err(Error::Geometry(format!(
            "{axis}: ({n} + 2*{p} - {k}) is not divisible by stride {s}"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Writes the receptive fields of one `c×h×w` image as columns of `dst`.
///
/// Row `(ci·kh + ky)·kw + kx` of `dst` (row stride `ld`) receives, at column
/// `col0 + oy·wo + ox`, the input sample under that kernel tap, or zero when
/// it falls in the padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col_into<T: Element>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    dst: &mut [T],
    ld: usize,
    col0: usize,
) {
    let (ho, wo) = ((h + 2 * g.ph - g.kh) / g.sh + 1, (w + 2 * g.pw - g.kw) / g.sw + 1);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let out = &mut dst[row * ld + col0..row * ld + col0 + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let line = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.sw == 1 && g.pw == 0 {
                        line.copy_from_slice(&src_row[kx..kx + wo]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatters columns back, summing overlaps into `dst`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add_into<T: Element>(
    cols: &[T],
    ld: usize,
    col0: usize,
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    dst: &mut [T],
) {
    let (ho, wo) = ((h + 2 * g.ph - g.kh) / g.sh + 1, (w + 2 * g.pw - g.kw) / g.sw + 1);
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ld + col0..row * ld + col0 + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Lowers a `C×H×W` tensor to a `(C·kh·kw)×(Ho·Wo)` column matrix.
pub fn im2col<T: Element>(x: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "im2col expects C×H×W".into(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = g.output_size(h, w)?;
    let rows = c * g.kh * g.kw;
    let mut out = vec![T::zero(); rows * ho * wo];
    im2col_into(x.as_slice(), c, h, w, g, &mut out, ho * wo, 0);
    Tensor::from_vec(&[rows, ho * wo], out)
}

/// Adjoint of [`im2col`] for an image of shape `C×H×W`.
pub fn col2im<T: Element>(cols: &Tensor<T>, c: usize, h: usize, w: usize, g: &ConvGeometry) -> Result<Tensor<T>> {
    let (ho, wo) = g.output_size(h, w)?;
    let expected = [c * g.kh * g.kw, ho * wo];
    if cols.shape() != expected {
        return Err(Error::Shape {
            op: "col2im",
            lhs: cols.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let mut out = vec![T::zero(); c * h * w];
    col2im_add_into(cols.as_slice(), ho * wo, 0, c, h, w, g, &mut out);
    Tensor::from_vec(&[c, h, w], out)
}
