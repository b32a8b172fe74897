use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Layer;
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Which tensor produced the worst element (`"input"` or a parameter name).
    pub worst: String,
    pub checked: usize,
}

/// Smallest denominator used when forming relative errors.
const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of `layer` at `input` against central finite
/// differences with step `h`, over every parameter element and every input
/// element.
///
/// The scalar objective is `Σ w ⊙ layer(input)` for a random projection `w`
/// drawn from `seed`. Parameter gradients are cleared before and after.
pub fn gradient_check(layer: &mut dyn Layer<f64>, input: &Tensor<f64>, h: f64, seed: u64) -> Result<GradCheckReport> {
    let y = layer.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0))?;
    let objective = |out: &Tensor<f64>| -> f64 { out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum() };

    layer.zero_grad();
    let dx = layer.backward(&w)?;
    let analytic: Vec<(String, Vec<f64>)> = layer
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.as_slice().to_vec()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: &str, a: f64, n: f64| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = name.to_string();
        }
    };

    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = layer.params_mut()[pi].1.value.as_slice()[i];
            layer.params_mut()[pi].1.value.as_mut_slice()[i] = orig + h;
            let plus = objective(&layer.forward(input)?);
            layer.params_mut()[pi].1.value.as_mut_slice()[i] = orig - h;
            let minus = objective(&layer.forward(input)?);
            layer.params_mut()[pi].1.value.as_mut_slice()[i] = orig;
            record(name, a, (plus - minus) / (2.0 * h));
        }
    }

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.as_slice()[i];
        x.as_mut_slice()[i] = orig + h;
        let plus = objective(&layer.forward(&x)?);
        x.as_mut_slice()[i] = orig - h;
        let minus = objective(&layer.forward(&x)?);
        x.as_mut_slice()[i] = orig;
        record("input", dx.as_slice()[i], (plus - minus) / (2.0 * h));
    }
    layer.zero_grad();
    Ok(report)
}
