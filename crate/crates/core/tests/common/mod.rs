#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use sst_core::grouping::Grouping;
use sst_core::{CodeParams, Orientation};

/// A random level matrix in {-1, 0, 1} whose sub-vectors hold at most k non-zeros.
pub fn random_levels(
    rows: usize,
    cols: usize,
    params: CodeParams,
    orientation: Orientation,
    rng: &mut impl Rng,
) -> Array2<i8> {
    let g = Grouping::new(rows, cols, params.n(), orientation).unwrap();
    let mut out = Array2::zeros((rows, cols));
    for s in 0..g.count() {
        let nz = rng.random_range(0..=params.k());
        for pos in sample(rng, params.n(), nz) {
            out[g.coord(s, pos)] = if rng.random_bool(0.5) { 1 } else { -1 };
        }
    }
    out
}

/// Directory with the IDX digit files: `SST_MNIST_DIR` or `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("SST_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}
