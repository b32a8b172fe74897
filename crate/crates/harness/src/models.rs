//! Reference architectures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsnn_core::nn::{
    fully_convolutionalize, Activation, Conv2d, Flatten, Layer, Linear, LogSoftmax, MaxPool2d, Sequential,
};
use wsnn_core::optim::{make_finetune_groups, LrMultipliers};
use wsnn_core::stn::{AffineMode, BilinearResize, LocalizerInput, SpatialTransformer};
use wsnn_core::tensor::Element;
use wsnn_core::wsl::{MilMaxPool, WeldonPool};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, LocalizerView, ModelName};
use crate::error::{HarnessError, Result};

/// Side of the classifier input and of the downsampled localizer view.
pub const CLASSIFIER_SIDE: usize = 32;

/// Spatial size of the last lenet32 feature map (50 channels).
pub const LENET_FC_SPATIAL: usize = 5;

fn conv_out(side: usize, k: usize) -> Result<usize> {
    side.checked_sub(k - 1)
        .filter(|&s| s > 0)
        .ok_or_else(|| HarnessError::Config(format!("input side {side} too small for a {k}x{k} convolution")))
}

fn relu<T: Element>() -> Activation<T> {
    Activation::relu()
}

/// conv(1→20,5) relu pool2 conv(20→50,5) relu pool2 on a 32×32 input.
fn lenet_features<T: Element>(m: &mut Sequential<T>) -> Result<()> {
    m.push("conv1", Conv2d::square(1, 20, 5, 1, 0)?)?;
    m.push("relu1", relu::<T>())?;
    m.push("pool1", MaxPool2d::square(2))?;
    m.push("conv2", Conv2d::square(20, 50, 5, 1, 0)?)?;
    m.push("relu2", relu::<T>())?;
    m.push("pool2", MaxPool2d::square(2))?;
    Ok(())
}

/// lenet32 up to the 10 class scores (no log-softmax).
fn lenet_logits<T: Element>(m: &mut Sequential<T>) -> Result<()> {
    lenet_features(m)?;
    let features = 50 * LENET_FC_SPATIAL * LENET_FC_SPATIAL;
    m.push("flatten", Flatten::new())?;
    m.push("fc1", Linear::new(features, 500)?)?;
    m.push("relu3", relu::<T>())?;
    m.push("fc2", Linear::new(500, 10)?)?;
    Ok(())
}

/// Localization network for a `side×side` view, ending in `P` outputs.
pub fn localizer<T: Element>(mode: AffineMode, side: usize) -> Result<Sequential<T>> {
    let mut loc = Sequential::new();
    loc.push("pool0", MaxPool2d::square(2))?;
    loc.push("conv1", Conv2d::square(1, 20, 5, 1, 0)?)?;
    loc.push("relu1", relu::<T>())?;
    loc.push("pool1", MaxPool2d::square(2))?;
    loc.push("conv2", Conv2d::square(20, 20, 5, 1, 0)?)?;
    loc.push("relu2", relu::<T>())?;
    let s = conv_out(conv_out(side / 2, 5)? / 2, 5)?;
    loc.push("flatten", Flatten::new())?;
    loc.push("fc1", Linear::new(20 * s * s, 20)?)?;
    loc.push("relu3", relu::<T>())?;
    loc.push("fc2", Linear::new(20, mode.num_params())?)?;
    Ok(loc)
}

/// Builds the named architecture with freshly initialized weights drawn from
/// `cfg.seed`.
pub fn build_model<T: Element>(cfg: &ExperimentConfig) -> Result<Sequential<T>> {
    let mut m = architecture(cfg, None)?;
    m.init_params(cfg.init, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    Ok(m)
}

/// Builds the model and, when `cfg.pretrained` names a checkpoint, loads its
/// weights and returns fine-tuning learning-rate multipliers.
///
/// For the fully convolutional heads the checkpoint is expected to hold a
/// lenet32, which is loaded before the conversion.
pub fn build_for_training<T: Element>(
    cfg: &ExperimentConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<(Sequential<T>, LrMultipliers)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let Some(ckpt) = pretrained else {
        let mut m = architecture(cfg, None)?;
        m.init_params(cfg.init, &mut rng);
        let mut mult = LrMultipliers::default();
        if cfg.frozen {
            mult.default = 0.0;
        }
        return Ok((m, mult));
    };
    let mut m = architecture(cfg, Some((ckpt, &mut rng)))?;
    let reset: Vec<&str> = cfg.reset_layers.iter().map(String::as_str).collect();
    let mut mult =
        make_finetune_groups(&mut m, &reset, cfg.finetune_multiplier, cfg.init, &mut rng).map_err(|e| match e {
            wsnn_core::Error::UnknownLayer(l) => HarnessError::Config(format!("reset_layers: no layer named '{l}'")),
            e => e.into(),
        })?;
    if cfg.frozen {
        mult.default = 0.0;
        mult.per_param.values_mut().for_each(|v| *v = 0.0);
    }
    Ok((m, mult))
}

/// Constructs the layer graph. With `pretrained`, the weights are initialized
/// and then overwritten wherever the checkpoint has a tensor of the same name
/// and shape.
fn architecture<T: Element>(
    cfg: &ExperimentConfig,
    pretrained: Option<(&Checkpoint, &mut ChaCha8Rng)>,
) -> Result<Sequential<T>> {
    let side = cfg.input_side();
    let mut m = Sequential::new();
    match cfg.model {
        ModelName::Lenet32 | ModelName::Lenet32Down => {
            if cfg.model == ModelName::Lenet32Down {
                m.push("down", BilinearResize::new(CLASSIFIER_SIDE, CLASSIFIER_SIDE)?)?;
            } else if side != CLASSIFIER_SIDE {
                return Err(HarnessError::Config(format!(
                    "lenet32 expects {CLASSIFIER_SIDE}x{CLASSIFIER_SIDE} input, dataset gives {side}x{side}"
                )));
            }
            lenet_logits(&mut m)?;
            m.push("logsoftmax", LogSoftmax::new())?;
        }
        ModelName::Mlp32Down => {
            m.push("down", BilinearResize::new(CLASSIFIER_SIDE, CLASSIFIER_SIDE)?)?;
            m.push("flatten", Flatten::new())?;
            m.push("fc1", Linear::new(CLASSIFIER_SIDE * CLASSIFIER_SIDE, 128)?)?;
            m.push("relu1", relu::<T>())?;
            m.push("fc2", Linear::new(128, 128)?)?;
            m.push("relu2", relu::<T>())?;
            m.push("fc3", Linear::new(128, 10)?)?;
            m.push("logsoftmax", LogSoftmax::new())?;
        }
        ModelName::Convnet100 => {
            lenet_features(&mut m)?;
            m.push("conv3", Conv2d::square(50, 50, 5, 1, 0)?)?;
            m.push("relu3", relu::<T>())?;
            m.push("pool3", MaxPool2d::square(2))?;
            let s = conv_out(conv_out(conv_out(side, 5)? / 2, 5)? / 2, 5)? / 2;
            if s == 0 {
                return Err(HarnessError::Config(format!(
                    "convnet100 needs a larger input than {side}"
                )));
            }
            m.push("flatten", Flatten::new())?;
            m.push("fc1", Linear::new(50 * s * s, 500)?)?;
            m.push("relu4", relu::<T>())?;
            m.push("fc2", Linear::new(500, 10)?)?;
            m.push("logsoftmax", LogSoftmax::new())?;
        }
        ModelName::MilFcn | ModelName::WeldonFcn => {
            let mut trunk = Sequential::new();
            lenet_logits(&mut trunk)?;
            if let Some((ckpt, rng)) = pretrained {
                trunk.init_params(cfg.init, rng);
                ckpt.load_matching(&mut trunk)?;
            }
            let mut fcn = fully_convolutionalize(trunk, (LENET_FC_SPATIAL, LENET_FC_SPATIAL))?;
            if cfg.model == ModelName::MilFcn {
                fcn.push("mil", MilMaxPool::new())?;
            } else {
                fcn.push("weldon", WeldonPool::new(cfg.weldon_k)?)?;
            }
            fcn.push("logsoftmax", LogSoftmax::new())?;
            return Ok(fcn);
        }
        ModelName::Stn => {
            let (view, loc_side) = match cfg.stn_localizer {
                LocalizerView::Downsampled => (
                    LocalizerInput::Downsampled(CLASSIFIER_SIDE, CLASSIFIER_SIDE),
                    CLASSIFIER_SIDE,
                ),
                LocalizerView::Full => (LocalizerInput::Full, side),
            };
            let st = SpatialTransformer::new(
                localizer(cfg.stn_mode, loc_side)?,
                cfg.stn_mode,
                cfg.stn_scale,
                (CLASSIFIER_SIDE, CLASSIFIER_SIDE),
                view,
            )?;
            m.push("stn", st)?;
            lenet_logits(&mut m)?;
            m.push("logsoftmax", LogSoftmax::new())?;
        }
    }
    if let Some((ckpt, rng)) = pretrained {
        m.init_params(cfg.init, rng);
        ckpt.load_matching(&mut m)?;
    }
    Ok(m)
}

/// Length of the layer prefix whose output is the pre-softmax class scores.
pub fn logit_prefix_len<T: Element>(model: &Sequential<T>) -> usize {
    match model.names().last() {
        Some(&"logsoftmax") => model.len() - 1,
        _ => model.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use wsnn_core::Tensor;

    fn cfg(model: &str, dataset: &str) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.set("model", model).unwrap();
        c.set("dataset", dataset).unwrap();
        c
    }

    #[test]
    fn lenet32_maps_digits_to_ten_scores() {
        let mut m = build_model::<f32>(&cfg("lenet32", "mnist32")).unwrap();
        let y = m.forward(&Tensor::zeros(&[2, 1, 32, 32]).unwrap()).unwrap();
        assert_eq!(y.shape(), [2, 10]);
        assert_eq!(m.layer("fc1").unwrap().params()[0].1.value.shape(), [500, 1250]);
    }

    #[test]
    fn lenet32_rejects_canvas_input() {
        assert!(build_model::<f32>(&cfg("lenet32", "translated")).is_err());
    }

    #[test]
    fn mil_fcn_score_map_is_larger_than_one() {
        let mut m = build_model::<f32>(&cfg("mil_fcn", "translated")).unwrap();
        let x = Tensor::zeros(&[1, 1, 100, 100]).unwrap();
        let maps = m.forward_prefix(&x, m.len() - 2).unwrap();
        assert_eq!(maps.shape(), [1, 10, 18, 18]);
        assert_eq!(m.forward(&x).unwrap().shape(), [1, 10]);
    }

    #[test]
    fn stn_parameter_count_is_localizer_plus_lenet() {
        let mut c = cfg("stn", "translated");
        c.set("stn_mode", "3p").unwrap();
        let stn = build_model::<f32>(&c).unwrap();
        let lenet = build_model::<f32>(&cfg("lenet32", "mnist32")).unwrap();
        let loc = localizer::<f32>(AffineMode::TranslationScale, 32).unwrap();
        assert_eq!(stn.num_params(), loc.num_params() + lenet.num_params());
        assert_eq!(loc.layer("fc1").unwrap().params()[0].1.value.shape(), [20, 80]);
    }

    #[test]
    fn every_model_builds_deterministically() {
        for name in [
            "lenet32_down",
            "mlp32_down",
            "convnet100",
            "mil_fcn",
            "weldon_fcn",
            "stn",
        ] {
            let c = cfg(name, "translated");
            let a = build_model::<f32>(&c).unwrap();
            let b = build_model::<f32>(&c).unwrap();
            for ((na, pa), (nb, pb)) in a.params().into_iter().zip(b.params()) {
                assert_eq!(na, nb);
                assert_eq!(pa.value, pb.value, "{name}.{na}");
            }
        }
    }

    #[test]
    fn convnet100_flattens_nine_by_nine() {
        let m = build_model::<f32>(&cfg("convnet100", "translated")).unwrap();
        assert_eq!(m.layer("fc1").unwrap().params()[0].1.value.shape(), [500, 4050]);
    }
}
