use super::{Activation, Conv2d, Dropout, Flatten, Linear, Sequential};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Rewrites a `… → Flatten → Linear → … → Linear` classifier as a fully
/// convolutional network.
///
/// The first linear layer after the flatten becomes an `h×w` convolution over
/// the feature map it used to see flattened (`fc_spatial = (h, w)`); every later
/// linear layer becomes a 1×1 convolution. Weights are reshaped, never altered,
/// and layer names are kept so parameter names line up with the source model.
/// Pointwise layers (activations, dropout) after the flatten are carried over;
/// anything else there is rejected.
pub fn fully_convolutionalize<T: Element>(model: Sequential<T>, fc_spatial: (usize, usize)) -> Result<Sequential<T>> {
    let (h, w) = fc_spatial;
    if h == 0 || w == 0 {
        return Err(Error::Geometry(format!("fc spatial size {h}x{w} must be positive")));
    }
    let mut out = Sequential::new();
    let mut seen_flatten = false;
    let mut seen_linear = false;
    for (name, layer) in model.into_layers() {
        if !seen_flatten {
            if layer.as_any().is::<Flatten>() {
                seen_flatten = true;
            } else {
                out.push_boxed(name, layer)?;
            }
            continue;
        }
        if layer.as_any().is::<Linear<T>>() {
            let lin = *layer
                .into_any()
                .downcast::<Linear<T>>()
                .map_err(|_| Error::InvalidArgument("linear downcast failed".into()))?;
            let (o, i) = (lin.out_features(), lin.in_features());
            let (kh, kw) = if seen_linear { (1, 1) } else { (h, w) };
            if i % (kh * kw) != 0 {
                return Err(Error::Geometry(format!(
                    "layer '{name}': {i} input features cannot be viewed as C×{kh}×{kw}"
                )));
            }
            let weight = lin.weight.value.reshape(&[o, i / (kh * kw), kh, kw])?;
            let conv = Conv2d::from_weights(weight, lin.bias.value, (1, 1), (0, 0))?;
            out.push_boxed(name, Box::new(conv))?;
            seen_linear = true;
        } else if layer.as_any().is::<Activation<T>>() || layer.as_any().is::<Dropout<T>>() {
            out.push_boxed(name, layer)?;
        } else {
            return Err(Error::InvalidArgument(format!(
                "cannot convert layer '{name}' ({}) that follows the flatten",
                layer.kind()
            )));
        }
    }
    if !seen_flatten || !seen_linear {
        return Err(Error::InvalidArgument(
            "model must contain a flatten followed by at least one linear layer".into(),
        ));
    }
    Ok(out)
}
