//! IDX (MNIST-style) file ingestion.

use std::fs;
use std::path::Path;

use crate::error::{Error, IngestionKind, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images with pixels kept as raw bytes; [`Dataset::pixel`] scales to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if cols == 0 || pixels.len() != cols * labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{} pixel bytes do not form {} rows of {cols}",
                    pixels.len(),
                    labels.len()
                ),
            ));
        }
        Ok(Self {
            rows: labels.len(),
            cols,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Values per image.
    pub fn width(&self) -> usize {
        self.cols
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.cols..(i + 1) * self.cols]
    }

    pub fn pixel(&self, i: usize, j: usize) -> f64 {
        f64::from(self.pixels[i * self.cols + j]) / 255.0
    }

    /// Writes image `i` scaled to `[0, 1]` into `out`.
    pub fn image_into(&self, i: usize, out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(self.raw_image(i)) {
            *o = f64::from(p) / 255.0;
        }
    }

    /// Keeps the first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.rows);
        Self {
            rows: n,
            cols: self.cols,
            pixels: self.pixels[..n * self.cols].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn ingest(path: &Path, kind: IngestionKind) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        kind,
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ingest(path, IngestionKind::Unreadable(e.to_string())))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            ingest(
                path,
                IngestionKind::Truncated {
                    expected: at + 4,
                    found: bytes.len(),
                },
            )
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(ingest(path, IngestionKind::BadMagic { expected, found }));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    let expected = header + len;
    if bytes.len() < expected {
        return Err(ingest(
            path,
            IngestionKind::Truncated {
                expected,
                found: bytes.len(),
            },
        ));
    }
    Ok(&bytes[header..expected])
}

/// Parses an image file (magic `0x00000803`, count, rows, cols) and a label
/// file (magic `0x00000801`, count). All header words are big-endian.
pub fn parse_idx(
    images: &[u8],
    images_path: &Path,
    labels: &[u8],
    labels_path: &Path,
) -> Result<Dataset> {
    check_magic(images, IMAGES_MAGIC, images_path)?;
    let n_img = be_u32(images, 4, images_path)? as usize;
    let rows = be_u32(images, 8, images_path)? as usize;
    let cols = be_u32(images, 12, images_path)? as usize;
    let pixels = payload(images, 16, n_img * rows * cols, images_path)?;

    check_magic(labels, LABELS_MAGIC, labels_path)?;
    let n_lab = be_u32(labels, 4, labels_path)? as usize;
    let label_bytes = payload(labels, 8, n_lab, labels_path)?;

    if n_img != n_lab {
        return Err(ingest(
            images_path,
            IngestionKind::CountMismatch {
                images: n_img,
                labels: n_lab,
            },
        ));
    }
    Dataset::new(rows * cols, pixels.to_vec(), label_bytes.to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_all(ip)?;
    let labels = read_all(lp)?;
    parse_idx(&images, ip, &labels, lp)
}

/// Serializes a dataset as an IDX image/label pair (`rows × cols` images).
pub fn encode_idx(data: &Dataset, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    assert_eq!(rows * cols, data.width());
    let mut images = Vec::with_capacity(16 + data.pixels.len());
    for word in [IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&word.to_be_bytes());
    }
    images.extend_from_slice(&data.pixels);
    let mut labels = Vec::with_capacity(8 + data.len());
    for word in [LABELS_MAGIC, data.len() as u32] {
        labels.extend_from_slice(&word.to_be_bytes());
    }
    labels.extend_from_slice(&data.labels);
    (images, labels)
}
