use rand::Rng;

use super::item_rng;
use crate::error::{Error, Result};
use crate::stn::resize_bilinear;
use crate::tensor::{Element, Tensor};

/// Per-sample training-time transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentPolicy {
    None,
    /// Integer shift by up to `max_px` in each direction, zero fill.
    Shift(usize),
    /// Horizontal flip with probability `p`.
    HFlip(f64),
    /// Rescale to a random square side in `[lo, hi]`, then take a random
    /// `out×out` crop.
    CropRescale {
        lo: usize,
        hi: usize,
        out: usize,
    },
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::HFlip(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::Config(format!("hflip probability {p} outside [0, 1]")))
            }
            Self::CropRescale { lo, hi, out } if lo > hi || lo < out || out == 0 => Err(Error::Config(format!(
                "crop_rescale needs 0 < out <= lo <= hi (got {lo}, {hi}, {out})"
            ))),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for AugmentPolicy {
    type Err = Error;

    /// `none`, `shift:N`, `hflip:P` or `crop_rescale:LO:HI:OUT`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad number '{v}' in augment policy '{s}'")))
        };
        let policy = match parts.as_slice() {
            ["none"] => Self::None,
            ["shift", n] => Self::Shift(num(n)?),
            ["hflip", p] => Self::HFlip(
                p.parse()
                    .map_err(|_| Error::Config(format!("bad probability in augment policy '{s}'")))?,
            ),
            ["crop_rescale", lo, hi, out] => Self::CropRescale {
                lo: num(lo)?,
                hi: num(hi)?,
                out: num(out)?,
            },
            _ => return Err(Error::Config(format!("unknown augment policy '{s}'"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Applies `policy` independently to each sample of a `B×C×H×W` batch.
///
/// Sample `b` uses the random stream `(seed, first_index + b)`, so results do
/// not depend on how items are grouped into batches.
pub fn augment<T: Element>(x: &Tensor<T>, policy: AugmentPolicy, seed: u64, first_index: u64) -> Result<Tensor<T>> {
    policy.validate()?;
    if x.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "augment expects B×C×H×W".into(),
        });
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    match policy {
        AugmentPolicy::None | AugmentPolicy::Shift(0) => Ok(x.clone()),
        AugmentPolicy::Shift(m) => {
            let mut out = x.zeros_like();
            for bi in 0..b {
                let mut rng = item_rng(seed, first_index + bi as u64);
                let dx = rng.random_range(-(m as i64)..=m as i64) as isize;
                let dy = rng.random_range(-(m as i64)..=m as i64) as isize;
                let (src, dst) = (x.outer(bi), out.outer_mut(bi));
                for ch in 0..c {
                    for y in 0..h {
                        let sy = y as isize - dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize - dx;
                            if sx >= 0 && sx < w as isize {
                                dst[(ch * h + y) * w + xx] = src[(ch * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
        AugmentPolicy::HFlip(p) => {
            let mut out = x.clone();
            for bi in 0..b {
                let mut rng = item_rng(seed, first_index + bi as u64);
                if rng.random::<f64>() < p {
                    for row in out.outer_mut(bi).chunks_exact_mut(w) {
                        row.reverse();
                    }
                }
            }
            Ok(out)
        }
        AugmentPolicy::CropRescale { lo, hi, out } => {
            let mut result = Tensor::zeros(&[b, c, out, out])?;
            for bi in 0..b {
                let mut rng = item_rng(seed, first_index + bi as u64);
                let side = rng.random_range(lo..=hi);
                let one = Tensor::from_vec(&[1, c, h, w], x.outer(bi).to_vec())?;
                let scaled = resize_bilinear(&one, side, side)?;
                let (ox, oy) = (rng.random_range(0..=side - out), rng.random_range(0..=side - out));
                let (src, dst) = (scaled.as_slice(), result.outer_mut(bi));
                for ch in 0..c {
                    for y in 0..out {
                        let s = (ch * side + oy + y) * side + ox;
                        dst[(ch * out + y) * out..(ch * out + y + 1) * out].copy_from_slice(&src[s..s + out]);
                    }
                }
            }
            Ok(result)
        }
    }
}
