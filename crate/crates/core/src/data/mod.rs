//! MNIST ingestion, translated-canvas synthesis, augmentation and resampling.
//!
//! Datasets keep pixels as bytes. A translated dataset stores each padded
//! digit once together with its offset on the canvas, and canvases are only
//! materialized (as floats in `[0, 1]`) when a batch is requested.

mod augment;
mod idx;
mod translate;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use augment::{augment, AugmentPolicy};
pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels, IMAGE_MAGIC, LABEL_MAGIC};
pub use translate::{make_cluttered_mnist, make_translated_mnist, pad, retranslate, ClutterConfig};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const NUM_CLASSES: usize = 10;

/// Side length of a padded digit.
pub const PADDED_DIGIT: usize = 32;

/// Independent RNG seed for item `index` of a stream seeded with `seed`, so
/// per-item randomness does not depend on iteration order or worker count.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(item_seed(seed, index))
}

/// Pixel storage of a [`LabeledDataset`].
#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    /// Full `height×width` byte images.
    Dense {
        height: usize,
        width: usize,
        pixels: Vec<u8>,
    },
    /// `glyph×glyph` byte digits placed at `offsets[i] = (dx, dy)` on an
    /// otherwise black `canvas×canvas` image.
    Placed {
        canvas: usize,
        glyph: usize,
        glyphs: Vec<u8>,
        offsets: Vec<(u16, u16)>,
    },
}

/// Single-channel images with digit labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    storage: Storage,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(storage: Storage, labels: Vec<u8>) -> Result<Self> {
        let (per_item, n) = match &storage {
            Storage::Dense { height, width, pixels } => (height * width, pixels.len() / (height * width).max(1)),
            Storage::Placed {
                canvas,
                glyph,
                glyphs,
                offsets,
            } => {
                if glyph > canvas {
                    return Err(Error::Config(format!("glyph {glyph} larger than canvas {canvas}")));
                }
                let limit = canvas - glyph;
                if offsets.iter().any(|&(x, y)| x as usize > limit || y as usize > limit) {
                    return Err(Error::InvalidArgument("placement offset outside the canvas".into()));
                }
                if offsets.len() * glyph * glyph != glyphs.len() {
                    return Err(Error::CountMismatch {
                        images: glyphs.len() / (glyph * glyph).max(1),
                        labels: offsets.len(),
                    });
                }
                (glyph * glyph, offsets.len())
            }
        };
        if per_item == 0 {
            return Err(Error::InvalidArgument("images must have positive size".into()));
        }
        if let Storage::Dense { pixels, .. } = &storage {
            if pixels.len() % per_item != 0 {
                return Err(Error::InvalidArgument(
                    "pixel buffer is not a whole number of images".into(),
                ));
            }
        }
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: bad as usize,
                size: NUM_CLASSES,
            });
        }
        Ok(Self { storage, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        match &self.storage {
            Storage::Dense { height, .. } => *height,
            Storage::Placed { canvas, .. } => *canvas,
        }
    }

    pub fn width(&self) -> usize {
        match &self.storage {
            Storage::Dense { width, .. } => *width,
            Storage::Placed { canvas, .. } => *canvas,
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn into_parts(self) -> (Storage, Vec<u8>) {
        (self.storage, self.labels)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Digit placement `(dx, dy)` for synthesized datasets.
    pub fn offsets(&self) -> Option<&[(u16, u16)]> {
        match &self.storage {
            Storage::Placed { offsets, .. } => Some(offsets),
            Storage::Dense { .. } => None,
        }
    }

    /// Per-class item counts.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Sum of the byte values of item `i` (placement never changes it).
    pub fn pixel_sum(&self, i: usize) -> u64 {
        self.source_bytes(i).iter().map(|&p| p as u64).sum()
    }

    /// The stored bytes of item `i`: the whole image, or the glyph.
    pub fn source_bytes(&self, i: usize) -> &[u8] {
        match &self.storage {
            Storage::Dense { height, width, pixels } => &pixels[i * height * width..(i + 1) * height * width],
            Storage::Placed { glyph, glyphs, .. } => &glyphs[i * glyph * glyph..(i + 1) * glyph * glyph],
        }
    }

    /// Writes item `i` as `height×width` values in `[0, 1]`.
    pub fn write_image<T: Element>(&self, i: usize, out: &mut [T]) {
        let scale = |p: u8| T::lit(p as f64 / 255.0);
        match &self.storage {
            Storage::Dense { .. } => {
                for (o, &p) in out.iter_mut().zip(self.source_bytes(i)) {
                    *o = scale(p);
                }
            }
            Storage::Placed {
                canvas, glyph, offsets, ..
            } => {
                out.iter_mut().for_each(|o| *o = T::zero());
                let (dx, dy) = (offsets[i].0 as usize, offsets[i].1 as usize);
                for (r, row) in self.source_bytes(i).chunks_exact(*glyph).enumerate() {
                    let start = (dy + r) * canvas + dx;
                    for (o, &p) in out[start..start + glyph].iter_mut().zip(row) {
                        *o = scale(p);
                    }
                }
            }
        }
    }

    /// `B×1×H×W` tensor and labels for the given items.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                what: "dataset",
                index: bad,
                size: self.len(),
            });
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (h, w) = (self.height(), self.width());
        let mut x = Tensor::zeros(&[indices.len(), 1, h, w])?;
        for (b, &i) in indices.iter().enumerate() {
            self.write_image(i, x.outer_mut(b));
        }
        Ok((x, indices.iter().map(|&i| self.label(i)).collect()))
    }

    /// Every item as one tensor.
    pub fn images<T: Element>(&self) -> Result<Tensor<T>> {
        let all: Vec<usize> = (0..self.len()).collect();
        Ok(self.batch(&all)?.0)
    }

    /// New dataset made of the given items, in order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                what: "dataset",
                index: bad,
                size: self.len(),
            });
        }
        let mut bytes = Vec::new();
        for &i in indices {
            bytes.extend_from_slice(self.source_bytes(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let storage = match &self.storage {
            Storage::Dense { height, width, .. } => Storage::Dense {
                height: *height,
                width: *width,
                pixels: bytes,
            },
            Storage::Placed {
                canvas, glyph, offsets, ..
            } => Storage::Placed {
                canvas: *canvas,
                glyph: *glyph,
                glyphs: bytes,
                offsets: indices.iter().map(|&i| offsets[i]).collect(),
            },
        };
        Self::new(storage, labels)
    }

    /// The first `n` items (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Keeps each item of class `c` with probability `keep[c]`, using a
    /// per-item random stream. Used to build class-unbalanced splits.
    pub fn subsample_classes(&self, keep: &[f64; NUM_CLASSES], seed: u64) -> Result<Self> {
        if keep.iter().any(|&k| !(0.0..=1.0).contains(&k)) {
            return Err(Error::Config("class keep fractions must lie in [0, 1]".into()));
        }
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| item_rng(seed, i as u64).random::<f64>() < keep[self.label(i)])
            .collect();
        if idx.is_empty() {
            return Err(Error::InvalidArgument("class subsampling removed every item".into()));
        }
        self.select(&idx)
    }
}

/// Indices of `n` draws with replacement from `0..n`.
pub fn bootstrap_indices(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("bootstrap of an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.random_range(0..n)).collect())
}

/// Resamples `ds` with replacement to its own size.
pub fn bootstrap_sample(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    ds.select(&bootstrap_indices(ds.len(), seed)?)
}

/// Bilinear (align-corners) resize of `B×C×H×W` images.
pub fn downsample<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    crate::stn::resize_bilinear(x, out_h, out_w)
}

/// Pixel mean and standard deviation of a training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    /// Statistics over every pixel of every canvas (background included).
    pub fn compute(ds: &LabeledDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument("statistics of an empty dataset".into()));
        }
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for i in 0..ds.len() {
            for &p in ds.source_bytes(i) {
                let v = p as f64 / 255.0;
                s1 += v;
                s2 += v * v;
            }
        }
        let n = (ds.len() * ds.height() * ds.width()) as f64;
        let mean = s1 / n;
        let var = (s2 / n - mean * mean).max(0.0);
        if var <= 0.0 {
            return Err(Error::InvalidArgument(
                "constant images have no spread to normalize".into(),
            ));
        }
        Ok(Self { mean, std: var.sqrt() })
    }

    pub fn normalize<T: Element>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (m, s) = (T::lit(self.mean), T::lit(self.std));
        x.map(|v| (v - m) / s)
    }

    pub fn denormalize<T: Element>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (m, s) = (T::lit(self.mean), T::lit(self.std));
        x.map(|v| v * s + m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(n: usize, side: usize) -> LabeledDataset {
        let pixels = (0..n * side * side).map(|i| ((i * 37) % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
        LabeledDataset::new(
            Storage::Dense {
                height: side,
                width: side,
                pixels,
            },
            labels,
        )
        .unwrap()
    }

    #[test]
    fn full_byte_scales_to_one() {
        let ds = LabeledDataset::new(
            Storage::Dense {
                height: 1,
                width: 2,
                pixels: vec![255, 0],
            },
            vec![3],
        )
        .unwrap();
        let (x, y) = ds.batch::<f32>(&[0]).unwrap();
        assert_eq!(x.as_slice(), [1.0, 0.0]);
        assert_eq!(y, [3]);
    }

    #[test]
    fn bootstrap_statistics() {
        let a = bootstrap_indices(10_000, 7).unwrap();
        assert_eq!(a, bootstrap_indices(10_000, 7).unwrap());
        let mut seen = vec![false; 10_000];
        a.iter().for_each(|&i| seen[i] = true);
        let unique = seen.iter().filter(|&&s| s).count() as f64 / 10_000.0;
        assert!((unique - (1.0 - (-1.0f64).exp())).abs() < 0.02, "{unique}");
        assert!(bootstrap_indices(0, 1).is_err());
    }

    #[test]
    fn bootstrap_keeps_labels_with_items() {
        let ds = toy(50, 3);
        let idx = bootstrap_indices(50, 3).unwrap();
        let bs = ds.select(&idx).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(bs.label(k), ds.label(i));
            assert_eq!(bs.source_bytes(k), ds.source_bytes(i));
        }
        assert_eq!(bootstrap_sample(&ds, 3).unwrap(), bs);
    }

    #[test]
    fn normalization_round_trips() {
        let ds = toy(20, 4);
        let stats = NormalizationStats::compute(&ds).unwrap();
        let x = ds.images::<f64>().unwrap();
        let z = stats.normalize(&x);
        let mean = z.sum() / z.len() as f64;
        assert!(mean.abs() < 1e-9);
        let back = stats.denormalize(&z);
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn class_subsampling_respects_zero_and_one() {
        let ds = toy(200, 2);
        let mut keep = [1.0; NUM_CLASSES];
        keep[3] = 0.0;
        let sub = ds.subsample_classes(&keep, 1).unwrap();
        assert_eq!(sub.class_counts()[3], 0);
        assert_eq!(sub.len(), 180);
    }

    #[test]
    fn invalid_construction_is_rejected() {
        assert!(LabeledDataset::new(
            Storage::Dense {
                height: 2,
                width: 2,
                pixels: vec![0; 8],
            },
            vec![1],
        )
        .is_err());
        assert!(LabeledDataset::new(
            Storage::Dense {
                height: 1,
                width: 1,
                pixels: vec![0],
            },
            vec![10],
        )
        .is_err());
    }
}
