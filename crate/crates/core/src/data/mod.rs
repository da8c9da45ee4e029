//! Patch-pair datasets: storage, file formats, augmentation, class-balanced
//! batching, and a seeded synthetic generator.

mod augment;
mod io;
mod sampler;
mod synthetic;

pub use augment::{augment, AugmentationSpec, Transform};
pub use io::{
    import_pgm_dir, load_dataset, parse_pairs, parse_pgm, read_patch_store, read_pgm, save_dataset, write_pairs,
    write_patch_store, write_pgm, PAIRS_FILE, STORE_FILE, STORE_MAGIC, STORE_VERSION,
};
pub use sampler::{balanced_batches, BalancedSampler};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::Label;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("pairs line {line}: {message}")]
    PairLine { line: usize, message: String },
    #[error("pairs line {line}: patch index {index} out of bounds for {count} patches")]
    IndexOutOfBounds { line: usize, index: usize, count: usize },
    #[error("pgm {path}: {message}")]
    Pgm { path: PathBuf, message: String },
    #[error("patch size mismatch: expected {expected:?}, got {got:?}")]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("dataset has no {0:?} pairs")]
    EmptyClass(Label),
    #[error("batch size must be even and positive, got {0}")]
    InvalidBatchSize(usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Patch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Patch {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(DataError::Invalid(format!(
                "{height}x{width} patch with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Two patches plus whether they depict the same structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPair {
    pub a: Patch,
    pub b: Patch,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Fixed-size patches stored back to back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchStore {
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
}

impl PatchStore {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, pixels: Vec::new() }
    }

    pub fn from_raw(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() % (height * width) != 0 {
            return Err(DataError::Invalid(format!(
                "{} bytes is not a whole number of {height}x{width} patches",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn raw(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn patch(&self, i: usize) -> Patch {
        Patch {
            height: self.height,
            width: self.width,
            pixels: self.pixels(i).to_vec(),
        }
    }

    pub fn push(&mut self, p: &Patch) -> Result<usize, DataError> {
        if (p.height, p.width) != (self.height, self.width) {
            return Err(DataError::SizeMismatch {
                expected: (self.height, self.width),
                got: (p.height, p.width),
            });
        }
        self.pixels.extend_from_slice(&p.pixels);
        Ok(self.len() - 1)
    }
}

/// Indices into a [`PatchStore`] plus the ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub a: usize,
    pub b: usize,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchDataset {
    pub store: PatchStore,
    pub pairs: Vec<PairIndex>,
    pub split: Split,
}

impl PatchDataset {
    pub fn new(store: PatchStore, pairs: Vec<PairIndex>, split: Split) -> Result<Self, DataError> {
        let count = store.len();
        for (i, p) in pairs.iter().enumerate() {
            for idx in [p.a, p.b] {
                if idx >= count {
                    return Err(DataError::IndexOutOfBounds { line: i + 1, index: idx, count });
                }
            }
        }
        Ok(Self { store, pairs, split })
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.store.height, self.store.width)
    }

    pub fn pair(&self, i: usize) -> PatchPair {
        let p = self.pairs[i];
        PatchPair {
            a: self.store.patch(p.a),
            b: self.store.patch(p.b),
            label: p.label,
        }
    }

    /// Pair indices of each class, in dataset order.
    pub fn class_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if p.label.is_match() {
                pos.push(i);
            } else {
                neg.push(i);
            }
        }
        (pos, neg)
    }

    pub fn count_labels(&self) -> (usize, usize) {
        let (p, n) = self.class_indices();
        (p.len(), n.len())
    }
}
