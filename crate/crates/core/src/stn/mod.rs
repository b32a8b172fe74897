//! Spatial transformer components.
//!
//! Coordinates are normalized to `[-1, 1]` with the align-corners convention:
//! `-1` is the centre of the first pixel along an axis and `+1` the centre of
//! the last. Samples that fall outside the input read zeros.

mod sampler;
mod transformer;

pub use sampler::{
    affine_grid, affine_grid_backward, bilinear_sample, bilinear_sample_backward, resize_bilinear,
    resize_bilinear_backward, BilinearResize,
};
pub use transformer::{LocalizerInput, SpatialTransformer};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How the localizer output parameterizes the 2×3 affine matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffineMode {
    /// `(t_x, t_y)` at a fixed isotropic scale.
    Translation,
    /// `(s, t_x, t_y)`.
    TranslationScale,
    /// `(s, r, t_x, t_y)`: isotropic scale, rotation by `r` radians, translation.
    TranslationScaleRotation,
    /// All six entries, row-major.
    Affine,
}

impl AffineMode {
    pub fn num_params(self) -> usize {
        match self {
            Self::Translation => 2,
            Self::TranslationScale => 3,
            Self::TranslationScaleRotation => 4,
            Self::Affine => 6,
        }
    }

    /// Raw parameters that expand to the identity transform (to the fixed
    /// scale, for [`AffineMode::Translation`]).
    pub fn identity_params(self) -> &'static [f64] {
        match self {
            Self::Translation => &[0.0, 0.0],
            Self::TranslationScale => &[1.0, 0.0, 0.0],
            Self::TranslationScaleRotation => &[1.0, 0.0, 0.0, 0.0],
            Self::Affine => &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Translation => "2p",
            Self::TranslationScale => "3p",
            Self::TranslationScaleRotation => "4p",
            Self::Affine => "6p",
        }
    }
}

impl std::str::FromStr for AffineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2p" | "translation" => Ok(Self::Translation),
            "3p" | "translation_scale" => Ok(Self::TranslationScale),
            "4p" | "translation_scale_rotation" => Ok(Self::TranslationScaleRotation),
            "6p" | "affine" => Ok(Self::Affine),
            other => Err(Error::Config(format!("unknown transformer mode '{other}'"))),
        }
    }
}

fn check_raw<T: Element>(raw: &Tensor<T>, mode: AffineMode) -> Result<usize> {
    if raw.rank() != 2 || raw.shape()[1] != mode.num_params() {
        return Err(Error::Shape {
            op: "expand_params",
            lhs: raw.shape().to_vec(),
            rhs: vec![raw.shape().first().copied().unwrap_or(0), mode.num_params()],
        });
    }
    Ok(raw.shape()[0])
}

/// Expands `B×P` raw parameters into `B×2×3` affine matrices.
pub fn expand_params<T: Element>(raw: &Tensor<T>, mode: AffineMode, fixed_scale: T) -> Result<Tensor<T>> {
    let b = check_raw(raw, mode)?;
    let z = T::zero();
    let mut out = Vec::with_capacity(b * 6);
    for p in raw.as_slice().chunks_exact(mode.num_params()) {
        let m = match mode {
            AffineMode::Translation => [fixed_scale, z, p[0], z, fixed_scale, p[1]],
            AffineMode::TranslationScale => [p[0], z, p[1], z, p[0], p[2]],
            AffineMode::TranslationScaleRotation => {
                let (s, (sin, cos)) = (p[0], p[1].sin_cos());
                [s * cos, -(s * sin), p[2], s * sin, s * cos, p[3]]
            }
            AffineMode::Affine => [p[0], p[1], p[2], p[3], p[4], p[5]],
        };
        out.extend_from_slice(&m);
    }
    Tensor::from_vec(&[b, 2, 3], out)
}

/// Chain rule from matrix gradients `B×2×3` back to raw parameters `B×P`.
pub fn expand_params_backward<T: Element>(
    raw: &Tensor<T>,
    mode: AffineMode,
    d_matrix: &Tensor<T>,
) -> Result<Tensor<T>> {
    let b = check_raw(raw, mode)?;
    if d_matrix.shape() != [b, 2, 3] {
        return Err(Error::Shape {
            op: "expand_params backward",
            lhs: d_matrix.shape().to_vec(),
            rhs: vec![b, 2, 3],
        });
    }
    let mut out = Vec::with_capacity(raw.len());
    for (p, d) in raw
        .as_slice()
        .chunks_exact(mode.num_params())
        .zip(d_matrix.as_slice().chunks_exact(6))
    {
        match mode {
            AffineMode::Translation => out.extend_from_slice(&[d[2], d[5]]),
            AffineMode::TranslationScale => out.extend_from_slice(&[d[0] + d[4], d[2], d[5]]),
            AffineMode::TranslationScaleRotation => {
                let (s, (sin, cos)) = (p[0], p[1].sin_cos());
                let ds = d[0] * cos - d[1] * sin + d[3] * sin + d[4] * cos;
                let dr = s * (-d[0] * sin - d[1] * cos + d[3] * cos - d[4] * sin);
                out.extend_from_slice(&[ds, dr, d[2], d[5]]);
            }
            AffineMode::Affine => out.extend_from_slice(d),
        }
    }
    Tensor::from_vec(raw.shape(), out)
}
