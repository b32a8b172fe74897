//! Input-gradient saliency maps.

use std::path::Path;

use wsnn_core::nn::{Layer, Sequential};
use wsnn_core::tensor::Element;
use wsnn_core::Tensor;

use crate::error::{HarnessError, Result};
use crate::models::logit_prefix_len;

/// `|∂ score_class / ∂ x|` for a single `1×C×H×W` image, max-reduced over
/// channels and min-max scaled to `[0, 1]`. The score is the pre-softmax
/// class score. A constant map (for example all zeros) is returned as zeros.
pub fn saliency<T: Element>(model: &mut Sequential<T>, image: &Tensor<T>, class: usize) -> Result<Tensor<f64>> {
    if image.rank() != 4 || image.shape()[0] != 1 {
        return Err(HarnessError::Config(format!(
            "saliency expects one 1×C×H×W image, got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[1], image.shape()[2], image.shape()[3]);
    let prefix = logit_prefix_len(model);
    model.set_training(false);
    let result = (|| {
        let scores = model.forward_prefix(image, prefix)?;
        let classes = scores.shape().get(1).copied().unwrap_or(0);
        if scores.rank() != 2 || class >= classes {
            return Err(HarnessError::Config(format!(
                "class index {class} out of range for {classes} classes"
            )));
        }
        let mut dy = scores.zeros_like();
        dy.outer_mut(0)[class] = T::one();
        let dx = model.backward_prefix(&dy, prefix)?;
        model.zero_grad();
        let g = dx.as_slice();
        let mut map = vec![0.0f64; h * w];
        for ch in 0..c {
            for (m, v) in map.iter_mut().zip(&g[ch * h * w..(ch + 1) * h * w]) {
                *m = m.max(v.to_f64().unwrap_or(0.0).abs());
            }
        }
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span > 0.0 && span.is_finite() {
            map.iter_mut().for_each(|v| *v = (*v - lo) / span);
        } else {
            map.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(Tensor::from_vec(&[h, w], map)?)
    })();
    model.set_training(true);
    result
}

/// Binary greyscale PGM (P5) of an `H×W` map with values in `[0, 1]`.
pub fn pgm_bytes(map: &Tensor<f64>) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(HarnessError::Config(format!(
            "PGM needs an H×W map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.as_slice().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor<f64>) -> Result<()> {
    std::fs::write(path, pgm_bytes(map)?).map_err(|e| HarnessError::io(path, e))
}
