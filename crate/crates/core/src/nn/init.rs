use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::tensor::{Element, Tensor};

/// Gaussian weight initialization schemes. Biases always start at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitScheme {
    /// `N(0, (1/n_inputs)^2)`.
    InverseFanIn,
    /// `N(0, (1/sqrt(n_inputs))^2)`.
    #[default]
    FanInSqrt,
}

impl InitScheme {
    pub fn std(self, fan_in: usize) -> f64 {
        let n = fan_in.max(1) as f64;
        match self {
            InitScheme::InverseFanIn => 1.0 / n,
            InitScheme::FanInSqrt => 1.0 / n.sqrt(),
        }
    }
}

/// Fills `w` with zero-mean Gaussian samples for a unit with `fan_in` inputs.
pub fn init_weight<T: Element>(w: &mut Tensor<T>, fan_in: usize, scheme: InitScheme, rng: &mut dyn RngCore) {
    let std = scheme.std(fan_in);
    for v in w.as_mut_slice() {
        let z: f64 = rng.sample(StandardNormal);
        *v = T::lit(z * std);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fan_in_sqrt_empirical_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = Tensor::<f64>::zeros(&[10_000]).unwrap();
        init_weight(&mut w, 400, InitScheme::FanInSqrt, &mut rng);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.05).abs() / 0.05 < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn inverse_fan_in_std() {
        assert_eq!(InitScheme::InverseFanIn.std(400), 1.0 / 400.0);
        assert_eq!(InitScheme::FanInSqrt.std(400), 0.05);
    }
}
