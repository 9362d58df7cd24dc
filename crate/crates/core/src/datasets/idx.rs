//! IDX (MNIST) binary files: big-endian `u32` magic, big-endian `u32`
//! dimensions, then unsigned bytes.

use std::path::Path;

use super::LabeledExample;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Decoded image file; `pixels` holds one row-major vector per image,
/// scaled from `0..=255` to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<f64>>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let needed = header
        .checked_add(len)
        .ok_or(Error::SizeOverflow("payload"))?;
    match bytes.len().cmp(&needed) {
        std::cmp::Ordering::Less => Err(Error::Truncated {
            needed,
            available: bytes.len(),
        }),
        std::cmp::Ordering::Greater => Err(Error::TrailingBytes(bytes.len() - needed)),
        std::cmp::Ordering::Equal => Ok(&bytes[header..]),
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let per_image = rows
        .checked_mul(cols)
        .ok_or(Error::SizeOverflow("image dimensions"))?;
    let total = count
        .checked_mul(per_image)
        .ok_or(Error::SizeOverflow("image count"))?;
    let data = payload(bytes, 16, total)?;
    let pixels = if per_image == 0 {
        vec![Vec::new(); count]
    } else {
        data.chunks_exact(per_image)
            .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
            .collect()
    };
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image file and its label file into labeled examples.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledExample>> {
    let images = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if images.pixels.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.pixels.len(),
            labels: labels.len(),
        });
    }
    Ok(images
        .pixels
        .into_iter()
        .zip(labels)
        .map(|(features, label)| LabeledExample {
            features,
            label: usize::from(label),
        })
        .collect())
}
