use std::path::Path;

use super::{LabeledDataset, Storage};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    header(path, bytes, IMAGE_MAGIC, 16)?;
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok((n, rows, cols, bytes[16..expected].to_vec()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    header(path, bytes, LABEL_MAGIC, 8)?;
    let n = be_u32(bytes, 4) as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an MNIST-style image/label file pair. Pixels are kept as bytes and
/// scaled by 1/255 when batches are materialized.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(ip, &std::fs::read(ip)?)?;
    let labels = parse_idx_labels(lp, &std::fs::read(lp)?)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::IndexOutOfRange {
            what: "digit label",
            index: bad as usize,
            size: 10,
        });
    }
    LabeledDataset::new(
        Storage::Dense {
            height: rows,
            width: cols,
            pixels,
        },
        labels,
    )
}
