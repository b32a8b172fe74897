use crate::error::{Error, Result};
use crate::nn::{expect_rank, impl_any, Layer};
use crate::tensor::{Element, Tensor};

/// Normalized coordinate of index `i` on an axis of `n` samples.
fn normalized(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Maps a normalized coordinate to pixel units. Values within a few ulps of
/// an integer are snapped so identity grids reproduce their input exactly.
fn to_pixel<T: Element>(x: T, n: usize) -> T {
    let half = T::lit((n - 1) as f64 / 2.0);
    let p = (x + T::one()) * half;
    let r = p.round();
    let tol = T::epsilon() * T::lit(16.0 * n.max(1) as f64);
    if (p - r).abs() <= tol {
        r
    } else {
        p
    }
}

/// Up to four `(flat_index, weight)` taps of a bilinear read at pixel
/// coordinates `(px, py)`, plus the data needed for coordinate gradients.
#[derive(Clone, Copy)]
struct Taps<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

impl<T: Element> Taps<T> {
    fn new(px: T, py: T) -> Self {
        let (fx0, fy0) = (px.floor(), py.floor());
        Self {
            x0: fx0.to_isize().unwrap_or(isize::MIN / 2),
            y0: fy0.to_isize().unwrap_or(isize::MIN / 2),
            fx: px - fx0,
            fy: py - fy0,
        }
    }

    /// Calls `f(flat, wx_term, wy_term, dx_sign, dy_sign)` for in-bounds neighbours.
    #[inline]
    fn for_each(&self, h: usize, w: usize, mut f: impl FnMut(usize, T, T, T, T)) {
        let one = T::one();
        for (dy, wy, sy) in [(0isize, one - self.fy, -one), (1, self.fy, one)] {
            let y = self.y0 + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            for (dx, wx, sx) in [(0isize, one - self.fx, -one), (1, self.fx, one)] {
                let x = self.x0 + dx;
                if x < 0 || x >= w as isize {
                    continue;
                }
                f(y as usize * w + x as usize, wx, wy, sx, sy);
            }
        }
    }
}

fn check_grid<T: Element>(u: &Tensor<T>, grid: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    expect_rank("bilinear_sample", u.shape(), 4)?;
    expect_rank("bilinear_sample grid", grid.shape(), 4)?;
    let (b, c, h, w) = (u.shape()[0], u.shape()[1], u.shape()[2], u.shape()[3]);
    let (gb, ho, wo, two) = (grid.shape()[0], grid.shape()[1], grid.shape()[2], grid.shape()[3]);
    if gb != b || two != 2 {
        return Err(Error::Shape {
            op: "bilinear_sample",
            lhs: u.shape().to_vec(),
            rhs: grid.shape().to_vec(),
        });
    }
    grid.check_finite("bilinear_sample grid")?;
    Ok((b, c, h, w, ho, wo))
}

/// Sampling grid `B×Ho×Wo×2` of source coordinates `(x_s, y_s)` obtained by
/// mapping the regular target grid through each `2×3` matrix.
pub fn affine_grid<T: Element>(a: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if a.rank() != 3 || a.shape()[1..] != [2, 3] {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "affine_grid expects B×2×3 matrices".into(),
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Geometry(format!("affine_grid output {out_h}x{out_w}")));
    }
    let b = a.shape()[0];
    let mut out = Vec::with_capacity(b * out_h * out_w * 2);
    for m in a.as_slice().chunks_exact(6) {
        for i in 0..out_h {
            let yt = T::lit(normalized(i, out_h));
            for j in 0..out_w {
                let xt = T::lit(normalized(j, out_w));
                out.push(m[0] * xt + m[1] * yt + m[2]);
                out.push(m[3] * xt + m[4] * yt + m[5]);
            }
        }
    }
    Tensor::from_vec(&[b, out_h, out_w, 2], out)
}

/// Gradient of [`affine_grid`] with respect to its matrices.
pub fn affine_grid_backward<T: Element>(d_grid: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("affine_grid backward", d_grid.shape(), 4)?;
    let (b, ho, wo) = (d_grid.shape()[0], d_grid.shape()[1], d_grid.shape()[2]);
    if d_grid.shape()[3] != 2 {
        return Err(Error::InvalidShape {
            shape: d_grid.shape().to_vec(),
            reason: "grid gradient must end in 2".into(),
        });
    }
    let mut out = Vec::with_capacity(b * 6);
    for g in d_grid.as_slice().chunks_exact(ho * wo * 2) {
        let mut m = [T::zero(); 6];
        for i in 0..ho {
            let yt = T::lit(normalized(i, ho));
            for j in 0..wo {
                let xt = T::lit(normalized(j, wo));
                let (gx, gy) = (g[(i * wo + j) * 2], g[(i * wo + j) * 2 + 1]);
                m[0] = m[0] + gx * xt;
                m[1] = m[1] + gx * yt;
                m[2] = m[2] + gx;
                m[3] = m[3] + gy * xt;
                m[4] = m[4] + gy * yt;
                m[5] = m[5] + gy;
            }
        }
        out.extend_from_slice(&m);
    }
    Tensor::from_vec(&[b, 2, 3], out)
}

fn sample_image<T: Element>(u: &[T], c: usize, h: usize, w: usize, grid: &[T], out: &mut [T]) {
    let npos = grid.len() / 2;
    for pos in 0..npos {
        let px = to_pixel(grid[2 * pos], w);
        let py = to_pixel(grid[2 * pos + 1], h);
        let taps = Taps::new(px, py);
        taps.for_each(h, w, |idx, wx, wy, _, _| {
            let wt = wx * wy;
            for ch in 0..c {
                let o = &mut out[ch * npos + pos];
                *o = *o + wt * u[ch * h * w + idx];
            }
        });
    }
}

/// Bilinear read of `U` (`B×C×H×W`) at every grid location, zero outside.
pub fn bilinear_sample<T: Element>(u: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w, ho, wo) = check_grid(u, grid)?;
    let mut out = Tensor::zeros(&[b, c, ho, wo])?;
    for bi in 0..b {
        sample_image(u.outer(bi), c, h, w, grid.outer(bi), out.outer_mut(bi));
    }
    Ok(out)
}

/// Gradients of [`bilinear_sample`] with respect to `U` and the grid.
pub fn bilinear_sample_backward<T: Element>(
    u: &Tensor<T>,
    grid: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w, ho, wo) = check_grid(u, grid)?;
    if d_out.shape() != [b, c, ho, wo] {
        return Err(Error::Shape {
            op: "bilinear_sample backward",
            lhs: d_out.shape().to_vec(),
            rhs: vec![b, c, ho, wo],
        });
    }
    let npos = ho * wo;
    let mut du = u.zeros_like();
    let mut dgrid = grid.zeros_like();
    let scale_x = T::lit((w - 1) as f64 / 2.0);
    let scale_y = T::lit((h - 1) as f64 / 2.0);
    for bi in 0..b {
        let (ui, gi, di) = (u.outer(bi), grid.outer(bi), d_out.outer(bi));
        let dui = du.outer_mut(bi);
        let dgi = dgrid.outer_mut(bi);
        for pos in 0..npos {
            let px = to_pixel(gi[2 * pos], w);
            let py = to_pixel(gi[2 * pos + 1], h);
            let taps = Taps::new(px, py);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            taps.for_each(h, w, |idx, wx, wy, sx, sy| {
                for ch in 0..c {
                    let g = di[ch * npos + pos];
                    let v = ui[ch * h * w + idx];
                    dui[ch * h * w + idx] = dui[ch * h * w + idx] + wx * wy * g;
                    gx = gx + sx * wy * v * g;
                    gy = gy + sy * wx * v * g;
                }
            });
            dgi[2 * pos] = gx * scale_x;
            dgi[2 * pos + 1] = gy * scale_y;
        }
    }
    Ok((du, dgrid))
}

fn identity_grid<T: Element>(out_h: usize, out_w: usize) -> Vec<T> {
    let mut g = Vec::with_capacity(out_h * out_w * 2);
    for i in 0..out_h {
        for j in 0..out_w {
            g.push(T::lit(normalized(j, out_w)));
            g.push(T::lit(normalized(i, out_h)));
        }
    }
    g
}

/// Align-corners bilinear resize of `B×C×H×W` maps.
pub fn resize_bilinear<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    expect_rank("resize_bilinear", x.shape(), 4)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Geometry(format!("resize to {out_h}x{out_w}")));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let grid = identity_grid::<T>(out_h, out_w);
    let mut out = Tensor::zeros(&[b, c, out_h, out_w])?;
    for bi in 0..b {
        sample_image(x.outer(bi), c, h, w, &grid, out.outer_mut(bi));
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: maps an output gradient back to `in_h×in_w`.
pub fn resize_bilinear_backward<T: Element>(d_out: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    expect_rank("resize_bilinear backward", d_out.shape(), 4)?;
    let (b, c, ho, wo) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2], d_out.shape()[3]);
    if (ho, wo) == (in_h, in_w) {
        return Ok(d_out.clone());
    }
    let grid = identity_grid::<T>(ho, wo);
    let npos = ho * wo;
    let mut dx = Tensor::zeros(&[b, c, in_h, in_w])?;
    for bi in 0..b {
        let di = d_out.outer(bi);
        let dxi = dx.outer_mut(bi);
        for pos in 0..npos {
            let taps = Taps::new(to_pixel(grid[2 * pos], in_w), to_pixel(grid[2 * pos + 1], in_h));
            taps.for_each(in_h, in_w, |idx, wx, wy, _, _| {
                for ch in 0..c {
                    let o = &mut dxi[ch * in_h * in_w + idx];
                    *o = *o + wx * wy * di[ch * npos + pos];
                }
            });
        }
    }
    Ok(dx)
}

/// Fixed-size bilinear resize as a layer.
#[derive(Clone, Debug)]
pub struct BilinearResize {
    out_h: usize,
    out_w: usize,
    input_hw: Option<(usize, usize)>,
}

impl BilinearResize {
    pub fn new(out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Geometry(format!("resize to {out_h}x{out_w}")));
        }
        Ok(Self {
            out_h,
            out_w,
            input_hw: None,
        })
    }
}

impl<T: Element> Layer<T> for BilinearResize {
    fn kind(&self) -> &'static str {
        "bilinear_resize"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = resize_bilinear(x, self.out_h, self.out_w)?;
        self.input_hw = Some((x.shape()[2], x.shape()[3]));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.input_hw.ok_or(Error::BackwardBeforeForward {
            layer: "bilinear_resize",
        })?;
        resize_bilinear_backward(dy, h, w)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("bilinear_resize", input, 4)?;
        Ok(vec![input[0], input[1], self.out_h, self.out_w])
    }

    impl_any!();
}
