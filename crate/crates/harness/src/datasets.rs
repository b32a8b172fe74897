//! Builds train/test splits from a config, and caches them in `WSNN` containers.

use std::path::Path;

use wsnn_core::data::{
    bootstrap_sample, load_mnist_idx, make_cluttered_mnist, make_translated_mnist, pad, ClutterConfig, LabeledDataset,
    Storage, PADDED_DIGIT,
};
use wsnn_core::Tensor;

use crate::checkpoint::{Container, Payload};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{HarnessError, Result};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Whether the four MNIST IDX files are present in `dir`.
pub fn mnist_available(dir: &Path) -> bool {
    [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .iter()
        .all(|f| dir.join(f).is_file())
}

/// The official 28×28 train and test splits.
pub fn load_mnist(dir: &Path) -> Result<Splits> {
    if !mnist_available(dir) {
        return Err(HarnessError::Config(format!(
            "MNIST IDX files not found in {} (run scripts/fetch-mnist.sh or set data_dir)",
            dir.display()
        )));
    }
    Ok(Splits {
        train: load_mnist_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?,
        test: load_mnist_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?,
    })
}

/// Applies the config's selection steps to the raw train split: class
/// subsampling, `subset`, then the bootstrap resample.
fn select_train(cfg: &ExperimentConfig, base: &LabeledDataset) -> Result<LabeledDataset> {
    let mut ds = if cfg.train_class_keep.iter().all(|&k| k == 1.0) {
        base.clone()
    } else {
        base.subsample_classes(&cfg.train_class_keep, cfg.train_seed ^ 0x5eed_c1a5)?
    };
    if cfg.subset > 0 {
        ds = ds.take(cfg.subset)?;
    }
    if cfg.bootstrap_seed != 0 {
        ds = bootstrap_sample(&ds, cfg.bootstrap_seed)?;
    }
    Ok(ds)
}

fn place(cfg: &ExperimentConfig, ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    Ok(match cfg.dataset {
        DatasetKind::Mnist32 => pad(ds, PADDED_DIGIT)?,
        DatasetKind::Translated => make_translated_mnist(ds, cfg.canvas, seed)?,
        DatasetKind::Cluttered => make_cluttered_mnist(ds, cfg.canvas, ClutterConfig::default(), seed)?,
        DatasetKind::Cache => ds.clone(),
    })
}

/// Builds the splits described by `cfg` from already loaded 28×28 MNIST.
pub fn splits_from_mnist(cfg: &ExperimentConfig, mnist: &Splits) -> Result<Splits> {
    let train = select_train(cfg, &mnist.train)?;
    let test = if cfg.test_subset > 0 {
        mnist.test.take(cfg.test_subset)?
    } else {
        mnist.test.clone()
    };
    Ok(Splits {
        train: place(cfg, &train, cfg.train_seed)?,
        test: place(cfg, &test, cfg.test_seed)?,
    })
}

/// Loads the splits described by `cfg`.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    if cfg.dataset == DatasetKind::Cache {
        let dir = cfg.mnist_dir();
        let train = dataset_load(&dir.join("train.wsnn"))?;
        let test = dataset_load(&dir.join("test.wsnn"))?;
        let test = if cfg.test_subset > 0 {
            test.take(cfg.test_subset)?
        } else {
            test
        };
        return Ok(Splits {
            train: select_train(cfg, &train)?,
            test,
        });
    }
    splits_from_mnist(cfg, &load_mnist(&cfg.mnist_dir())?)
}

/// Serializes a dataset (compact storage is kept as is).
pub fn dataset_container(ds: &LabeledDataset) -> Container {
    let n = ds.len();
    let mut c = Container::default();
    c.push(
        "data.labels",
        Payload::U8 {
            shape: vec![n],
            data: ds.labels().to_vec(),
        },
    );
    match ds.storage() {
        Storage::Dense { height, width, pixels } => c.push(
            "data.pixels",
            Payload::U8 {
                shape: vec![n, *height, *width],
                data: pixels.clone(),
            },
        ),
        Storage::Placed {
            canvas,
            glyph,
            glyphs,
            offsets,
        } => {
            c.push(
                "data.canvas",
                Payload::U64 {
                    shape: vec![1],
                    data: vec![*canvas as u64],
                },
            );
            c.push(
                "data.glyphs",
                Payload::U8 {
                    shape: vec![n, *glyph, *glyph],
                    data: glyphs.clone(),
                },
            );
            c.push(
                "data.offsets",
                Payload::U64 {
                    shape: vec![n, 2],
                    data: offsets.iter().flat_map(|&(x, y)| [x as u64, y as u64]).collect(),
                },
            );
        }
    }
    c
}

pub fn dataset_from_container(path: &Path, c: &Container) -> Result<LabeledDataset> {
    let format = |reason: &str| HarnessError::CheckpointFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let labels = match c.get("data.labels") {
        Some(Payload::U8 { data, .. }) => data.clone(),
        _ => return Err(format("missing data.labels")),
    };
    let storage = match (
        c.get("data.pixels"),
        c.get("data.glyphs"),
        c.get("data.offsets"),
        c.get("data.canvas"),
    ) {
        (Some(Payload::U8 { shape, data }), _, _, _) if shape.len() == 3 => Storage::Dense {
            height: shape[1],
            width: shape[2],
            pixels: data.clone(),
        },
        (
            None,
            Some(Payload::U8 { shape, data: glyphs }),
            Some(Payload::U64 { data: offs, .. }),
            Some(Payload::U64 { data: canvas, .. }),
        ) if shape.len() == 3 && canvas.len() == 1 => {
            let offsets = offs
                .chunks_exact(2)
                .map(|p| Ok((u16::try_from(p[0])?, u16::try_from(p[1])?)))
                .collect::<std::result::Result<Vec<_>, std::num::TryFromIntError>>()
                .map_err(|_| format("offset out of range"))?;
            Storage::Placed {
                canvas: canvas[0] as usize,
                glyph: shape[1],
                glyphs: glyphs.clone(),
                offsets,
            }
        }
        _ => return Err(format("no image storage entries")),
    };
    Ok(LabeledDataset::new(storage, labels)?)
}

pub fn dataset_save(ds: &LabeledDataset, path: &Path) -> Result<()> {
    dataset_container(ds).save(path)
}

pub fn dataset_load(path: &Path) -> Result<LabeledDataset> {
    dataset_from_container(path, &Container::load(path)?)
}

/// Splits `0..n` into consecutive chunks of at most `size`.
pub fn chunks(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| s..(s + size).min(n))
}

/// Materializes items `range` of `ds` as a batch tensor.
pub fn range_batch<T: wsnn_core::tensor::Element>(
    ds: &LabeledDataset,
    range: std::ops::Range<usize>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let idx: Vec<usize> = range.collect();
    Ok(ds.batch(&idx)?)
}
