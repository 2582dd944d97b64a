//! IDX files in the canonical MNIST layout: a big-endian `u32` magic
//! (`0x0000_0803` for `u8` images, `0x0000_0801` for `u8` labels), one
//! big-endian `u32` per dimension, then raw bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, ImageDims, LabeledImage};
use crate::error::{invalid, Error, Result};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let chunk = self.take(4, what)?;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let actual = self.u32("magic")?;
        if actual != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                actual,
            });
        }
        Ok(())
    }
}

/// Maps a byte to `[-1, 1]`: 0 → -1, 255 → 1.
pub fn byte_to_pixel(b: u8) -> f64 {
    f64::from(b) / 255.0 * 2.0 - 1.0
}

pub fn pixel_to_byte(p: f64) -> u8 {
    ((p.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

/// Returns `(rows, cols, raw bytes per image)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        images.push(r.take(rows * cols, &format!("image {i}"))?.to_vec());
    }
    Ok((rows, cols, images))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    Ok(r.take(count, "labels")?.to_vec())
}

/// Loads an image/label IDX pair; the class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (rows, cols, raw) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if raw.len() != labels.len() {
        return Err(invalid(format!(
            "{} images but {} labels",
            raw.len(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let images = raw
        .into_iter()
        .zip(labels)
        .map(|(px, label)| LabeledImage {
            pixels: px.into_iter().map(byte_to_pixel).collect(),
            label: label as usize,
        })
        .collect();
    Dataset::new(images, num_classes, ImageDims::new(rows, cols, 1))
}

/// Writes a single-channel dataset as an IDX image/label pair, quantizing pixels to bytes.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if dataset.dims.channels != 1 {
        return Err(invalid("IDX export supports single-channel images only"));
    }
    if dataset.num_classes > 256 {
        return Err(invalid("IDX labels are single bytes"));
    }
    let n = u32::try_from(dataset.len()).map_err(|_| invalid("too many images for IDX"))?;
    let mut img = Vec::with_capacity(16 + dataset.len() * dataset.dims.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(dataset.dims.height as u32).to_be_bytes());
    img.extend_from_slice(&(dataset.dims.width as u32).to_be_bytes());
    for im in &dataset.images {
        img.extend(im.pixels.iter().map(|p| pixel_to_byte(*p)));
    }
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(dataset.images.iter().map(|im| im.label as u8));
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}
