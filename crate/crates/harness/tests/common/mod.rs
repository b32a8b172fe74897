#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsnn_core::data::{make_translated_mnist, LabeledDataset, Storage};
use wsnn_harness::datasets::dataset_save;
use wsnn_harness::ExperimentConfig;

/// A 32×32 glyph for `class`: a fixed left bar as an anchor plus class-coded
/// horizontal strokes, with per-item intensity jitter.
fn glyph(class: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut g = vec![0u8; 32 * 32];
    let mut fill = |y0: usize, y1: usize, x0: usize, x1: usize, rng: &mut ChaCha8Rng| {
        for y in y0..y1 {
            for x in x0..x1 {
                g[y * 32 + x] = rng.random_range(170..=255);
            }
        }
    };
    fill(6, 26, 6, 9, rng);
    for bit in 0..4 {
        if (class + 1) >> bit & 1 == 1 {
            fill(6 + bit * 5, 9 + bit * 5, 9, 26, rng);
        }
    }
    g
}

pub fn glyphs(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let pixels = labels.iter().flat_map(|&c| glyph(c as usize, &mut rng)).collect();
    LabeledDataset::new(
        Storage::Dense {
            height: 32,
            width: 32,
            pixels,
        },
        labels,
    )
    .unwrap()
}

/// Writes translated train/test caches into `dir`.
pub fn write_cache(dir: &Path, canvas: usize, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let tr = make_translated_mnist(&glyphs(train, 1), canvas, 11).unwrap();
    let te = make_translated_mnist(&glyphs(test, 2), canvas, 12).unwrap();
    dataset_save(&tr, &dir.join("train.wsnn")).unwrap();
    dataset_save(&te, &dir.join("test.wsnn")).unwrap();
}

/// Small, fast config over a cache written by [`write_cache`].
pub fn cache_config(data: &Path, out: &Path, canvas: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("dataset", "cache"),
        ("canvas", &canvas.to_string()),
        ("data_dir", data.to_str().unwrap()),
        ("out", out.to_str().unwrap()),
        ("batch_size", "32"),
        ("eval_batch", "64"),
        ("lr", "1e-3"),
        ("wall_clock", "false"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}
