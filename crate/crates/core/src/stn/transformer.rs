use rand::RngCore;

use super::{
    affine_grid, affine_grid_backward, bilinear_sample, bilinear_sample_backward, expand_params,
    expand_params_backward, resize_bilinear, resize_bilinear_backward, AffineMode,
};
use crate::error::{Error, Result};
use crate::nn::{expect_rank, impl_any, InitScheme, Layer, Linear, Param, Sequential};
use crate::tensor::{Element, Tensor};

/// What the localization network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalizerInput {
    /// The transformer input itself.
    Full,
    /// The input bilinearly resized to `(h, w)`. The sampler still reads the
    /// full-resolution input.
    Downsampled(usize, usize),
}

struct Saved<T> {
    input: Tensor<T>,
    raw: Tensor<T>,
    grid: Tensor<T>,
}

/// Localizer → parameter expansion → grid generator → bilinear sampler.
pub struct SpatialTransformer<T: Element> {
    pub localizer: Sequential<T>,
    mode: AffineMode,
    fixed_scale: f64,
    out_h: usize,
    out_w: usize,
    localizer_input: LocalizerInput,
    saved: Option<Saved<T>>,
    last_matrices: Option<Tensor<T>>,
}

impl<T: Element> SpatialTransformer<T> {
    /// The localizer must end in a [`Linear`] layer emitting
    /// `mode.num_params()` values. That layer is set to the identity transform.
    pub fn new(
        localizer: Sequential<T>,
        mode: AffineMode,
        fixed_scale: f64,
        out_size: (usize, usize),
        localizer_input: LocalizerInput,
    ) -> Result<Self> {
        if out_size.0 == 0 || out_size.1 == 0 {
            return Err(Error::Geometry(format!(
                "transformer output {}x{}",
                out_size.0, out_size.1
            )));
        }
        if !(fixed_scale.is_finite() && fixed_scale > 0.0) {
            return Err(Error::Config(format!(
                "transformer fixed scale {fixed_scale} must be positive"
            )));
        }
        let mut st = Self {
            localizer,
            mode,
            fixed_scale,
            out_h: out_size.0,
            out_w: out_size.1,
            localizer_input,
            saved: None,
            last_matrices: None,
        };
        st.reset_to_identity()?;
        Ok(st)
    }

    pub fn mode(&self) -> AffineMode {
        self.mode
    }

    pub fn fixed_scale(&self) -> f64 {
        self.fixed_scale
    }

    /// `B×2×3` matrices used by the most recent forward.
    pub fn last_matrices(&self) -> Option<&Tensor<T>> {
        self.last_matrices.as_ref()
    }

    fn head(&mut self) -> Result<&mut Linear<T>> {
        let p = self.mode.num_params();
        let head = self
            .localizer
            .last_mut()
            .and_then(|l| l.as_any_mut().downcast_mut::<Linear<T>>())
            .ok_or_else(|| Error::InvalidArgument("localizer must end in a linear layer".into()))?;
        if head.out_features() != p {
            return Err(Error::Shape {
                op: "spatial_transformer localizer",
                lhs: vec![head.out_features()],
                rhs: vec![p],
            });
        }
        Ok(head)
    }

    /// Zero final weights and identity bias.
    pub fn reset_to_identity(&mut self) -> Result<()> {
        let ident = self.mode.identity_params();
        let head = self.head()?;
        head.weight.value.as_mut_slice().iter_mut().for_each(|w| *w = T::zero());
        for (b, &v) in head.bias.value.as_mut_slice().iter_mut().zip(ident) {
            *b = T::lit(v);
        }
        Ok(())
    }
}

impl<T: Element> Layer<T> for SpatialTransformer<T> {
    fn kind(&self) -> &'static str {
        "spatial_transformer"
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("spatial_transformer", x.shape(), 4)?;
        let raw = match self.localizer_input {
            LocalizerInput::Full => self.localizer.forward(x)?,
            LocalizerInput::Downsampled(h, w) => self.localizer.forward(&resize_bilinear(x, h, w)?)?,
        };
        let a = expand_params(&raw, self.mode, T::lit(self.fixed_scale))?;
        let grid = affine_grid(&a, self.out_h, self.out_w)?;
        let v = bilinear_sample(x, &grid)?;
        self.last_matrices = Some(a);
        self.saved = Some(Saved {
            input: x.clone(),
            raw,
            grid,
        });
        Ok(v)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let saved = self.saved.as_ref().ok_or(Error::BackwardBeforeForward {
            layer: "spatial_transformer",
        })?;
        let (mut dx, dgrid) = bilinear_sample_backward(&saved.input, &saved.grid, dy)?;
        let da = affine_grid_backward(&dgrid)?;
        let draw = expand_params_backward(&saved.raw, self.mode, &da)?;
        let (h, w) = (saved.input.shape()[2], saved.input.shape()[3]);
        let dloc = self.localizer.backward(&draw)?;
        let dloc = match self.localizer_input {
            LocalizerInput::Full => dloc,
            LocalizerInput::Downsampled(..) => resize_bilinear_backward(&dloc, h, w)?,
        };
        dx.axpy(T::one(), &dloc)?;
        Ok(dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("spatial_transformer", input, 4)?;
        Ok(vec![input[0], input[1], self.out_h, self.out_w])
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        self.localizer
            .params()
            .into_iter()
            .map(|(n, p)| (format!("localizer.{n}"), p))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.localizer
            .params_mut()
            .into_iter()
            .map(|(n, p)| (format!("localizer.{n}"), p))
            .collect()
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.localizer
            .buffers()
            .into_iter()
            .map(|(n, b)| (format!("localizer.{n}"), b))
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.localizer
            .buffers_mut()
            .into_iter()
            .map(|(n, b)| (format!("localizer.{n}"), b))
            .collect()
    }

    fn set_training(&mut self, training: bool) {
        self.localizer.set_training(training);
    }

    fn init_params(&mut self, scheme: InitScheme, rng: &mut dyn RngCore) {
        self.localizer.init_params(scheme, rng);
        // The head was validated at construction, so this cannot fail.
        let _ = self.reset_to_identity();
    }

    impl_any!();
}
