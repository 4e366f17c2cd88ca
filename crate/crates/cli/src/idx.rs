//! Reader for the big-endian IDX image/label format (MNIST-style files).

use bilevel_kfac::tasks::ClassificationData;
use bilevel_kfac::Mat;
use std::path::Path;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: bad magic {got:#010x}, expected {expected:#010x}")]
    Magic { path: String, expected: u32, got: u32 },
    #[error("{path}: truncated, need {need} bytes but file has {have}")]
    Truncated { path: String, need: usize, have: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn need(path: &Path, bytes: &[u8], n: usize) -> Result<(), IdxError> {
    if bytes.len() < n {
        return Err(IdxError::Truncated {
            path: path.display().to_string(),
            need: n,
            have: bytes.len(),
        });
    }
    Ok(())
}

fn magic(path: &Path, bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    need(path, bytes, 4)?;
    let got = be_u32(bytes, 0);
    if got != expected {
        return Err(IdxError::Magic {
            path: path.display().to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

/// Decode an image file into a `(rows·cols) × count` matrix scaled to [0, 1].
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<Mat, IdxError> {
    magic(path, bytes, IMAGE_MAGIC)?;
    need(path, bytes, 16)?;
    let count = be_u32(bytes, 4) as usize;
    let pixels = be_u32(bytes, 8) as usize * be_u32(bytes, 12) as usize;
    need(path, bytes, 16 + count * pixels)?;
    let body = &bytes[16..16 + count * pixels];
    Ok(Mat::from_fn(pixels, count, |i, n| body[n * pixels + i] as f64 / 255.0))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    magic(path, bytes, LABEL_MAGIC)?;
    need(path, bytes, 8)?;
    let count = be_u32(bytes, 4) as usize;
    need(path, bytes, 8 + count)?;
    Ok(bytes[8..8 + count].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<ClassificationData, IdxError> {
    let inputs = parse_images(images, &read(images)?)?;
    let labels = parse_labels(labels, &read(labels)?)?;
    if inputs.ncols() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: inputs.ncols(),
            labels: labels.len(),
        });
    }
    Ok(ClassificationData { inputs, labels })
}

/// Encode images (row-major `rows × cols` pixels per example) and labels;
/// used to build fixtures.
pub fn encode(rows: u32, cols: u32, pixels: &[Vec<u8>], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    for p in pixels {
        img.extend_from_slice(p);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}
