//! IDX files as used by MNIST: a big-endian `u32` magic, one big-endian `u32`
//! per dimension, then raw unsigned bytes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{split_per_class, Task, TaskStream};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic number in {kind} file: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        kind: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated {kind} file: expected {expected} bytes, found {actual}")]
    Truncated {
        kind: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// One `rows * cols` vector per image, pixel bytes scaled to `[0, 1]`.
    pub pixels: Vec<Vec<f64>>,
}

fn be_u32(bytes: &[u8], offset: usize, kind: &'static str) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            kind,
            expected: offset + 4,
            actual: bytes.len(),
        })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let kind = "image";
    let magic = be_u32(bytes, 0, kind)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::BadMagic {
            kind,
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, kind)? as usize;
    let rows = be_u32(bytes, 8, kind)? as usize;
    let cols = be_u32(bytes, 12, kind)? as usize;
    let size = rows * cols;
    let expected = 16 + n * size;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            kind,
            expected,
            actual: bytes.len(),
        });
    }
    let pixels = bytes[16..expected]
        .chunks(size.max(1))
        .take(n)
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let kind = "label";
    let magic = be_u32(bytes, 0, kind)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::BadMagic {
            kind,
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, kind)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            kind,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an IDX image/label pair and splits it into tasks.
///
/// Classes are taken in ascending label order, `classes_per_task` per task;
/// within each class the first 80% of samples (file order) are training data.
pub fn load_idx_stream(
    image_path: &Path,
    label_path: &Path,
    tasks: usize,
    classes_per_task: usize,
) -> Result<TaskStream> {
    let images = parse_idx_images(&read(image_path)?)?;
    let labels = parse_idx_labels(&read(label_path)?)?;
    if images.pixels.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.pixels.len(),
            labels: labels.len(),
        }
        .into());
    }
    let mut classes: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    classes.sort_unstable();
    classes.dedup();
    let needed = tasks * classes_per_task;
    if tasks == 0 || classes_per_task == 0 || classes.len() < needed {
        return Err(Error::Data(format!(
            "{tasks} tasks of {classes_per_task} classes need {needed} classes, files hold {}",
            classes.len()
        )));
    }

    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let task_classes = classes[t * classes_per_task..(t + 1) * classes_per_task].to_vec();
        let per_class: Vec<Vec<Vec<f64>>> = task_classes
            .iter()
            .map(|&c| {
                images
                    .pixels
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| usize::from(l) == c)
                    .map(|(p, _)| p.clone())
                    .collect()
            })
            .collect();
        let (train, test) = split_per_class(&task_classes, per_class)?;
        out.push(Task {
            classes: task_classes,
            train,
            test,
        });
    }
    TaskStream::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGE_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn two_image_fixture() {
        let bytes = image_file(2, 1, 2, &[0, 255, 51, 102]);
        let imgs = parse_idx_images(&bytes).unwrap();
        assert_eq!((imgs.rows, imgs.cols), (1, 2));
        assert_eq!(imgs.pixels, vec![vec![0.0, 1.0], vec![0.2, 0.4]]);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = image_file(1, 1, 1, &[7]);
        bytes[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(IdxError::BadMagic { found: 0x801, .. })
        ));
        assert!(matches!(
            parse_idx_labels(&image_file(1, 1, 1, &[7])),
            Err(IdxError::BadMagic { kind: "label", .. })
        ));
    }

    #[test]
    fn truncated() {
        let bytes = image_file(3, 2, 2, &[1, 2, 3]);
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(IdxError::Truncated { expected: 28, actual: 19, .. })
        ));
        assert!(matches!(
            parse_idx_labels(&[0, 0, 8]),
            Err(IdxError::Truncated { .. })
        ));
    }
}
