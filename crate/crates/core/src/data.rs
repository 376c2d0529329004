//! Labelled image datasets: MNIST IDX files and synthetic corpora.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::SplitMix64;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;
/// Training images kept for training; the rest of the 60k file is validation.
pub const MNIST_TRAIN_SPLIT: usize = 50_000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{what}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { what: &'static str, expected: u32, found: u32 },
    #[error("{what}: truncated, header declares {declared} bytes but file has {actual}")]
    Truncated { what: &'static str, declared: u64, actual: u64 },
    #[error("{what}: {extra} unexpected trailing bytes")]
    TrailingBytes { what: &'static str, extra: u64 },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not below {classes}")]
    LabelRange { index: usize, label: usize, classes: usize },
    #[error("pixel {value} at index {index} outside [0, 1]")]
    PixelRange { index: usize, value: f64 },
    #[error("dataset would be empty")]
    Empty,
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
}

/// Images scaled to `[0, 1]`, one per row, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self, DataError> {
        if images.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        if let Some((index, &value)) = images
            .as_slice()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::PixelRange { index, value });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::LabelRange {
                index,
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Values per image.
    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Splits by index into `[0, at)` and `[at, len)`.
    pub fn split_at(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.len());
        let head: Vec<usize> = (0..at).collect();
        let tail: Vec<usize> = (at..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn check_len(what: &'static str, bytes: &[u8], declared: u64) -> Result<(), DataError> {
    let actual = bytes.len() as u64;
    if actual < declared {
        return Err(DataError::Truncated { what, declared, actual });
    }
    if actual > declared {
        return Err(DataError::TrailingBytes {
            what,
            extra: actual - declared,
        });
    }
    Ok(())
}

/// Parses an IDX3 image file: returns `(count, rows*cols, raw pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8]), DataError> {
    const WHAT: &str = "image file";
    check_header(WHAT, bytes, 16)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            what: WHAT,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4) as u64;
    let rows = be_u32(bytes, 8) as u64;
    let cols = be_u32(bytes, 12) as u64;
    // Computed in u64 so a hostile header cannot overflow.
    check_len(WHAT, bytes, 16 + count * rows * cols)?;
    Ok((count as usize, (rows * cols) as usize, &bytes[16..]))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    const WHAT: &str = "label file";
    check_header(WHAT, bytes, 8)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            what: WHAT,
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4) as u64;
    check_len(WHAT, bytes, 8 + count)?;
    Ok(&bytes[8..])
}

fn check_header(what: &'static str, bytes: &[u8], header: u64) -> Result<(), DataError> {
    if (bytes.len() as u64) < header {
        return Err(DataError::Truncated {
            what,
            declared: header,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

/// Builds a dataset from raw IDX bytes; pixels become `byte / 255`.
pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset, DataError> {
    let (count, dim, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    if count == 0 {
        return Err(DataError::Empty);
    }
    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Matrix::from_vec(count, dim, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), MNIST_CLASSES)
}

/// Loads an MNIST image/label file pair.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    dataset_from_idx(&images, &labels)
}

/// The three MNIST splits.
#[derive(Debug, Clone)]
pub struct MnistSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Loads MNIST from a directory holding the four uncompressed IDX files.
/// The first 50k training images are the training split, the last 10k the
/// validation split.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<MnistSplits, DataError> {
    let dir = dir.as_ref();
    let full = load_mnist_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_mnist_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    let (train, validation) = full.split_at(MNIST_TRAIN_SPLIT);
    Ok(MnistSplits { train, validation, test })
}

/// Environment variable naming the MNIST directory.
pub const DATA_DIR_ENV: &str = "SPLITINFER_DATA_DIR";

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Candidate MNIST directories in lookup order: `$SPLITINFER_DATA_DIR`,
/// `data/mnist` under the workspace root, then `/root/data/mnist`.
pub fn mnist_dir_candidates() -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    if let Some(d) = std::env::var_os(DATA_DIR_ENV) {
        dirs.push(PathBuf::from(d));
    }
    dirs.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dirs.push(PathBuf::from("/root/data/mnist"));
    dirs
}

/// First candidate directory that holds all four MNIST files.
pub fn find_mnist_dir() -> Option<PathBuf> {
    mnist_dir_candidates()
        .into_iter()
        .find(|d| MNIST_FILES.iter().all(|f| d.join(f).is_file()))
}

/// Gaussian blobs: class `k` is centred on the unit vector `e_k`, with
/// isotropic noise of standard deviation `noise`, clipped to `[0, 1]`.
/// Samples are interleaved by class.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if classes == 0 || per_class == 0 {
        return Err(DataError::Empty);
    }
    if dim < classes {
        return Err(DataError::Invalid(format!("dim {dim} < classes {classes}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::Invalid(format!("noise {noise}")));
    }
    let mut rng = SplitMix64::new(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for k in 0..classes {
            for j in 0..dim {
                let centre = if j == k { 1.0 } else { 0.0 };
                let v = if noise > 0.0 { centre + noise * rng.standard_normal() } else { centre };
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(k);
        }
    }
    let images = Matrix::from_vec(n, dim, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, classes)
}

/// The four XOR points, labels 0/1.
pub fn xor() -> Dataset {
    let images = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]])
        .expect("static data");
    Dataset::new(images, vec![0, 1, 1, 0], 2).expect("static data")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn pixel_scaling_endpoints_and_round_trip() {
        let pixels: Vec<u8> = (0..=255).collect();
        let ds = dataset_from_idx(&idx_images(1, 16, 16, &pixels), &idx_labels(&[3])).unwrap();
        assert_eq!(ds.image(0)[0], 0.0);
        assert_eq!(ds.image(0)[255], 1.0);
        for (b, &p) in pixels.iter().zip(ds.image(0)) {
            assert_eq!((255.0 * p).round() as u8, *b);
        }
    }

    #[test]
    fn hostile_header_does_not_allocate() {
        let bytes = idx_images(u32::MAX, 28, 28, &[0; 10]);
        assert!(matches!(parse_idx_images(&bytes), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn blobs_are_deterministic_and_validated() {
        let a = synth_blobs(3, 5, 4, 0.1, 9).unwrap();
        assert_eq!(a, synth_blobs(3, 5, 4, 0.1, 9).unwrap());
        assert_ne!(a, synth_blobs(3, 5, 4, 0.1, 10).unwrap());
        assert_eq!(a.len(), 15);
        assert!(matches!(synth_blobs(3, 0, 4, 0.1, 9), Err(DataError::Empty)));
        assert!(synth_blobs(5, 2, 4, 0.1, 9).is_err());
    }

    #[test]
    fn dataset_invariants() {
        let m = Matrix::from_rows(&[vec![0.5, 1.5]]).unwrap();
        assert!(matches!(Dataset::new(m, vec![0], 2), Err(DataError::PixelRange { .. })));
        let m = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(Dataset::new(m.clone(), vec![2], 2), Err(DataError::LabelRange { .. })));
        assert!(matches!(Dataset::new(m, vec![], 2), Err(DataError::CountMismatch { .. })));
    }
}
