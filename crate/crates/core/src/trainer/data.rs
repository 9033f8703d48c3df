//! Datasets: IDX digit files and seeded Gaussian blobs.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row.
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dataset(format!(
                "{} samples but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Seeded shuffle, then `split_at(n)`.
    pub fn shuffled_split(&self, n: usize, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = self.subset(&idx);
        shuffled.split_at(n)
    }

    /// Index batches of a seeded permutation. The last batch may be short.
    pub fn batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Dataset("truncated IDX header".into()))
}

/// Images scaled to [0, 1], one flattened image per row.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Dataset(format!("bad IDX image magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * dim {
        return Err(Error::Dataset(format!(
            "IDX image body has {} bytes, expected {}",
            body.len(),
            count * dim
        )));
    }
    Ok(Array2::from_shape_fn((count, dim), |(i, j)| {
        body[i * dim + j] as f64 / 255.0
    }))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Dataset(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Dataset(format!(
            "IDX label body has {} bytes, expected {count}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&fs::read(images)?)?;
    let y = parse_idx_labels(&fs::read(labels)?)?;
    Dataset::new(x, y, 10)
}

/// Training and test sets from a directory holding the four standard IDX files.
pub fn load_digits(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// `samples` points split evenly over `classes` isotropic Gaussians whose
/// means are drawn with norm `separation` and unit noise.
pub fn gaussian_blobs(
    samples: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || dim == 0 {
        return Err(Error::Dataset(
            "blobs need at least one class and one dimension".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm * separation).collect()
        })
        .collect();
    let mut y: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    y.shuffle(&mut rng);
    let mut x = Array2::zeros((samples, dim));
    for (i, &c) in y.iter().enumerate() {
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            x[[i, j]] = centers[c][j] + noise;
        }
    }
    Dataset::new(x, y, classes)
}
