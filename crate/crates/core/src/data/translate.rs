use rand::Rng;

use super::{item_rng, LabeledDataset, Storage, PADDED_DIGIT};
use crate::error::{Error, Result};

/// Centres each image on a black `side×side` frame.
pub fn pad(ds: &LabeledDataset, side: usize) -> Result<LabeledDataset> {
    let Storage::Dense { height, width, pixels } = ds.storage() else {
        return Err(Error::InvalidArgument("pad expects dense images".into()));
    };
    let (h, w) = (*height, *width);
    if side < h || side < w {
        return Err(Error::Config(format!("cannot pad {h}x{w} images to {side}")));
    }
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    let mut out = vec![0u8; ds.len() * side * side];
    for (src, dst) in pixels.chunks_exact(h * w).zip(out.chunks_exact_mut(side * side)) {
        for r in 0..h {
            let d = (top + r) * side + left;
            dst[d..d + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
    }
    LabeledDataset::new(
        Storage::Dense {
            height: side,
            width: side,
            pixels: out,
        },
        ds.labels().to_vec(),
    )
}

/// Bytes of every digit padded to 32×32 (already padded datasets pass through).
fn padded_glyphs(base: &LabeledDataset) -> Result<Vec<u8>> {
    match base.storage() {
        Storage::Dense { height, width, .. } if *height == PADDED_DIGIT && *width == PADDED_DIGIT => {
            Ok((0..base.len()).flat_map(|i| base.source_bytes(i).to_vec()).collect())
        }
        Storage::Dense { .. } => match pad(base, PADDED_DIGIT)?.into_parts().0 {
            Storage::Dense { pixels, .. } => Ok(pixels),
            Storage::Placed { .. } => unreachable!("pad returns dense storage"),
        },
        Storage::Placed { glyph, glyphs, .. } if *glyph == PADDED_DIGIT => Ok(glyphs.clone()),
        Storage::Placed { glyph, .. } => Err(Error::InvalidArgument(format!(
            "cannot re-place {glyph}x{glyph} glyphs"
        ))),
    }
}

fn draw_offsets(n: usize, canvas: usize, seed: u64) -> Vec<(u16, u16)> {
    let span = canvas - PADDED_DIGIT;
    (0..n)
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            let dx = rng.random_range(0..=span) as u16;
            let dy = rng.random_range(0..=span) as u16;
            (dx, dy)
        })
        .collect()
}

/// Pads each digit to 32×32 and places it at a uniform random integer offset
/// `(dx, dy) ∈ [0, canvas−32]²` on a black `canvas×canvas` image.
///
/// Item `i` draws its offset from a stream derived from `(seed, i)`.
pub fn make_translated_mnist(base: &LabeledDataset, canvas: usize, seed: u64) -> Result<LabeledDataset> {
    if canvas < PADDED_DIGIT {
        return Err(Error::Config(format!("canvas {canvas} is smaller than {PADDED_DIGIT}")));
    }
    if canvas - PADDED_DIGIT > u16::MAX as usize {
        return Err(Error::Config(format!("canvas {canvas} too large")));
    }
    let glyphs = padded_glyphs(base)?;
    LabeledDataset::new(
        Storage::Placed {
            canvas,
            glyph: PADDED_DIGIT,
            glyphs,
            offsets: draw_offsets(base.len(), canvas, seed),
        },
        base.labels().to_vec(),
    )
}

/// The same digits with freshly drawn offsets (online translation).
pub fn retranslate(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    match ds.storage() {
        Storage::Placed { canvas, .. } => make_translated_mnist(ds, *canvas, seed),
        Storage::Dense { .. } => Err(Error::InvalidArgument(
            "retranslate expects a translated dataset".into(),
        )),
    }
}

/// Distractor settings for [`make_cluttered_mnist`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClutterConfig {
    pub distractors: usize,
    pub patch: usize,
}

impl Default for ClutterConfig {
    fn default() -> Self {
        Self {
            distractors: 4,
            patch: 8,
        }
    }
}

/// Translated digits plus `distractors` random `patch×patch` crops of other
/// digits scattered over the canvas (pixel-wise maximum). Images are stored
/// densely.
pub fn make_cluttered_mnist(
    base: &LabeledDataset,
    canvas: usize,
    clutter: ClutterConfig,
    seed: u64,
) -> Result<LabeledDataset> {
    if clutter.patch == 0 || clutter.patch > PADDED_DIGIT || clutter.patch > canvas {
        return Err(Error::Config(format!("clutter patch {} out of range", clutter.patch)));
    }
    let placed = make_translated_mnist(base, canvas, seed)?;
    let glyphs = padded_glyphs(base)?;
    let n = base.len();
    let g2 = PADDED_DIGIT * PADDED_DIGIT;
    let mut pixels = vec![0u8; n * canvas * canvas];
    let mut img = vec![0f32; canvas * canvas];
    for (i, out) in pixels.chunks_exact_mut(canvas * canvas).enumerate() {
        placed.write_image(i, &mut img);
        for (o, &v) in out.iter_mut().zip(&img) {
            *o = (v * 255.0).round() as u8;
        }
        let mut rng = item_rng(seed ^ 0xc1u64.rotate_left(56), i as u64);
        for _ in 0..clutter.distractors {
            let src = rng.random_range(0..n);
            let (sx, sy) = (
                rng.random_range(0..=PADDED_DIGIT - clutter.patch),
                rng.random_range(0..=PADDED_DIGIT - clutter.patch),
            );
            let (tx, ty) = (
                rng.random_range(0..=canvas - clutter.patch),
                rng.random_range(0..=canvas - clutter.patch),
            );
            let glyph = &glyphs[src * g2..(src + 1) * g2];
            for r in 0..clutter.patch {
                for c in 0..clutter.patch {
                    let v = glyph[(sy + r) * PADDED_DIGIT + sx + c];
                    let o = &mut out[(ty + r) * canvas + tx + c];
                    *o = (*o).max(v);
                }
            }
        }
    }
    LabeledDataset::new(
        Storage::Dense {
            height: canvas,
            width: canvas,
            pixels,
        },
        base.labels().to_vec(),
    )
}
