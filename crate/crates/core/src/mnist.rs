//! MNIST IDX ingestion and the train / evaluation split.
//!
//! IDX headers are big-endian: a 32-bit magic (`0x00000803` for 3-D unsigned
//! byte images, `0x00000801` for labels), then one 32-bit size per
//! dimension, then the raw bytes.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Idx(format!("truncated header: missing {what}")))
}

/// Images scaled to `[0, 1]` by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Idx(format!("expected image magic {IMAGE_MAGIC:#010x}, found {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(Error::Idx(format!("expected {MNIST_SIDE}x{MNIST_SIDE} images, header says {rows}x{cols}")));
    }
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() != expected {
        return Err(Error::Idx(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(rows * cols)
        .map(|px| Image::new(rows, cols, px.iter().map(|&b| b as f64 / 255.0).collect()).unwrap())
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Idx(format!("expected label magic {LABEL_MAGIC:#010x}, found {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Idx(format!("payload has {} labels, header implies {count}", payload.len())));
    }
    if let Some(pos) = payload.iter().position(|&l| l > 9) {
        return Err(Error::Idx(format!("label {} at position {pos} is not a digit", payload[pos])));
    }
    Ok(payload.to_vec())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub provenance: Vec<SourceFile>,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<u8>, provenance: Vec<SourceFile>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if labels.iter().any(|&l| l > 9) {
            return Err(Error::Dataset("label outside 0..=9".into()));
        }
        if images.iter().any(|im| im.as_slice().iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::Dataset("pixel outside [0, 1]".into()));
        }
        Ok(LabeledDataset { images, labels, provenance })
    }

    pub fn from_bytes(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Self> {
        Self::new(parse_idx_images(image_bytes)?, parse_idx_labels(label_bytes)?, Vec::new())
    }

    pub fn load(images_path: &Path, labels_path: &Path) -> Result<Self> {
        let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
        let (ib, lb) = (read(images_path)?, read(labels_path)?);
        let mut ds = Self::from_bytes(&ib, &lb)?;
        ds.provenance = vec![
            SourceFile { path: images_path.to_path_buf(), sha256: sha256_hex(&ib) },
            SourceFile { path: labels_path.to_path_buf(), sha256: sha256_hex(&lb) },
        ];
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices_of(&self, digit: u8) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == digit).map(|(i, _)| i).collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The two MNIST files pairs found in one directory.
#[derive(Clone, Debug)]
pub struct MnistData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_mnist(dir: &Path) -> Result<MnistData> {
    for name in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        if !dir.join(name).is_file() {
            return Err(Error::Dataset(format!(
                "{} not found; place the four uncompressed MNIST IDX files in {}",
                name,
                dir.display()
            )));
        }
    }
    Ok(MnistData {
        train: LabeledDataset::load(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?,
        test: LabeledDataset::load(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalImage {
    pub digit: u8,
    /// Position among the selected images of this digit.
    pub index: usize,
    /// Row in the test file.
    pub source_index: usize,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Image>,
    pub eval: Vec<EvalImage>,
}

impl Splits {
    pub fn eval_image(&self, digit: u8, index: usize) -> Option<&EvalImage> {
        self.eval.iter().find(|e| e.digit == digit && e.index == index)
    }
}

/// Training images are every `train_digit` in the training file; the
/// evaluation set is `eval_per_digit` seeded draws per digit from the test
/// file, ordered by digit and then by file position.
pub fn make_splits(data: &MnistData, train_digit: u8, eval_per_digit: usize, seed: u64) -> Result<Splits> {
    if train_digit > 9 {
        return Err(Error::Dataset(format!("train digit {train_digit} is not a digit")));
    }
    let train: Vec<Image> = data.train.indices_of(train_digit).into_iter().map(|i| data.train.images[i].clone()).collect();
    if train.is_empty() {
        return Err(Error::Dataset(format!("no training images of digit {train_digit}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = Vec::with_capacity(10 * eval_per_digit);
    for digit in 0..10u8 {
        let pool = data.test.indices_of(digit);
        if pool.len() < eval_per_digit {
            return Err(Error::Dataset(format!(
                "digit {digit} has {} test images, {eval_per_digit} required",
                pool.len()
            )));
        }
        let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), eval_per_digit).into_iter().map(|k| pool[k]).collect();
        chosen.sort_unstable();
        for (index, source_index) in chosen.into_iter().enumerate() {
            eval.push(EvalImage { digit, index, source_index, image: data.test.images[source_index].clone() });
        }
    }
    Ok(Splits { train, eval })
}
