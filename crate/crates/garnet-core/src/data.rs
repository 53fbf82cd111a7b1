//! Dataset ingestion: MNIST in the IDX image/label format and CIFAR10 in its
//! binary batch format, plus the input binarization shared by training and
//! inference (pixel value >= 128 becomes bit 1 / activation +1).
//!
//! The dataset root is resolved from, in order: an explicit path, the
//! `GARNET_DATA` environment variable, then `./data`. MNIST lives in
//! `<root>/mnist`, CIFAR10 in `<root>/cifar10`.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use thiserror::Error;

use crate::arch::Shape;
use crate::tensor::BinaryTensor;

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "GARNET_DATA";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn bad(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format { path: path.to_owned(), message: message.into() }
}

/// Which split of a dataset to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// An in-memory labeled image set, pixels stored as raw bytes in
/// channel-major order per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub input: Shape,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        let (c, h, w) = self.input;
        c * h * w
    }

    /// Raw pixel bytes of one image.
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    /// Threshold an image into the packed bit representation used by the
    /// reference forward pass and the protocol.
    pub fn binarized(&self, i: usize) -> BinaryTensor {
        let (c, h, w) = self.input;
        let bits: Vec<bool> = self.image(i).iter().map(|&p| threshold_bit(p)).collect();
        BinaryTensor::from_bools(&[c, h, w], &bits)
    }

    /// Binarize a batch into the {-1, +1} float domain used in training.
    /// Returns the batch tensor and the matching labels.
    pub fn pm1_batch(&self, indices: &[usize]) -> (Array4<f32>, Vec<u8>) {
        let (c, h, w) = self.input;
        let mut out = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            out.extend(
                self.image(i)
                    .iter()
                    .map(|&p| if threshold_bit(p) { 1.0f32 } else { -1.0 }),
            );
            labels.push(self.labels[i]);
        }
        let x = Array4::from_shape_vec((indices.len(), c, h, w), out)
            .expect("sized to match above");
        (x, labels)
    }

    /// A new dataset holding images `[start, end)` of this one.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        assert!(start <= end && end <= self.len(), "slice bounds");
        let n = self.pixels_per_image();
        Dataset {
            input: self.input,
            images: self.images[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }
}

/// The input binarization rule: a pixel maps to bit 1 when its value is at
/// least 128.
pub fn threshold_bit(pixel: u8) -> bool {
    pixel >= 128
}

/// Resolve the dataset root from an optional explicit path, the
/// [`DATA_ENV`] variable, or the `./data` default.
pub fn resolve_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_owned();
    }
    if let Some(v) = std::env::var_os(DATA_ENV) {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    PathBuf::from("data")
}

fn read_be_u32(r: &mut impl Read, path: &Path) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| bad(path, "truncated header"))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX3 image file: big-endian magic 0x00000803, count, rows, cols,
/// then one unsigned byte per pixel. Returns `(pixels, count, rows, cols)`.
pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize), DataError> {
    let mut f = io::BufReader::new(fs::File::open(path)?);
    let magic = read_be_u32(&mut f, path)?;
    if magic != 0x0000_0803 {
        return Err(bad(path, format!("bad image magic {magic:#010x}")));
    }
    let count = read_be_u32(&mut f, path)? as usize;
    let rows = read_be_u32(&mut f, path)? as usize;
    let cols = read_be_u32(&mut f, path)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    f.read_exact(&mut pixels)
        .map_err(|_| bad(path, "truncated image data"))?;
    let mut extra = [0u8; 1];
    if f.read(&mut extra)? != 0 {
        return Err(bad(path, "trailing bytes after image data"));
    }
    Ok((pixels, count, rows, cols))
}

/// Load an IDX1 label file: big-endian magic 0x00000801, count, then one
/// byte per label.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut f = io::BufReader::new(fs::File::open(path)?);
    let magic = read_be_u32(&mut f, path)?;
    if magic != 0x0000_0801 {
        return Err(bad(path, format!("bad label magic {magic:#010x}")));
    }
    let count = read_be_u32(&mut f, path)? as usize;
    let mut labels = vec![0u8; count];
    f.read_exact(&mut labels)
        .map_err(|_| bad(path, "truncated label data"))?;
    let mut extra = [0u8; 1];
    if f.read(&mut extra)? != 0 {
        return Err(bad(path, "trailing bytes after label data"));
    }
    Ok(labels)
}

/// Write an IDX3 image file (used to build small test fixtures).
pub fn save_idx_images(path: &Path, pixels: &[u8], rows: usize, cols: usize) -> Result<(), DataError> {
    assert!(rows * cols > 0 && pixels.len() % (rows * cols) == 0, "pixel count");
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Write an IDX1 label file (used to build small test fixtures).
pub fn save_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Load an MNIST split from `<root>/mnist` using the standard file names.
pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset, DataError> {
    let dir = root.join("mnist");
    let (img_name, lbl_name) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let img_path = dir.join(img_name);
    let (pixels, count, rows, cols) = load_idx_images(&img_path)?;
    let labels = load_idx_labels(&dir.join(lbl_name))?;
    if labels.len() != count {
        return Err(bad(
            &img_path,
            format!("{count} images but {} labels", labels.len()),
        ));
    }
    Ok(Dataset { input: (1, rows, cols), images: pixels, labels })
}

/// Split the MNIST training set into a training part and the fixed
/// validation part (the last 5,000 images).
pub fn mnist_train_val(root: &Path) -> Result<(Dataset, Dataset), DataError> {
    let full = load_mnist(root, Split::Train)?;
    split_train_val(full, 5_000)
}

/// Carve the last `val_count` images off as a validation set.
pub fn split_train_val(full: Dataset, val_count: usize) -> Result<(Dataset, Dataset), DataError> {
    if full.len() <= val_count {
        return Err(DataError::Format {
            path: PathBuf::new(),
            message: format!("{} images cannot spare {val_count} for validation", full.len()),
        });
    }
    let cut = full.len() - val_count;
    let train = full.slice(0, cut);
    let val = full.slice(cut, full.len());
    Ok((train, val))
}

/// Load a CIFAR10 split from `<root>/cifar10`, accepting the standard binary
/// batch layout: each record is a label byte followed by 3072 pixel bytes
/// (1024 red, 1024 green, 1024 blue).
pub fn load_cifar10(root: &Path, split: Split) -> Result<Dataset, DataError> {
    let dir = root.join("cifar10");
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    const REC: usize = 1 + 3 * 1024;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in &files {
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % REC != 0 {
            return Err(bad(path, format!("{} bytes is not a whole number of records", bytes.len())));
        }
        for rec in bytes.chunks_exact(REC) {
            if rec[0] > 9 {
                return Err(bad(path, format!("label {} out of range", rec[0])));
            }
            labels.push(rec[0]);
            images.extend_from_slice(&rec[1..]);
        }
    }
    Ok(Dataset { input: (3, 32, 32), images, labels })
}

/// True when the given root holds the files for an MNIST (or CIFAR10) load.
pub fn available(root: &Path, name: &str) -> bool {
    match name {
        "mnist" => root.join("mnist/train-images-idx3-ubyte").is_file(),
        "cifar10" => root.join("cifar10/data_batch_1.bin").is_file(),
        _ => false,
    }
}
