use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sst_core::store::ModelFile;
use sst_core::trainer::{gaussian_blobs, load_digits, load_idx, Dataset};

use crate::DataArgs;

mod compress;
mod infer;
mod report;
mod tables;
mod train;
mod verify;

pub use compress::{compress, decompress};
pub use infer::infer;
pub use report::report;
pub use tables::tables;
pub use train::train;
pub use verify::verify;

/// Validation samples held out of the digit training set.
const DIGIT_VALIDATION: usize = 5000;

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ModelFile::deserialize(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_model(model: &ModelFile, path: &Path) -> Result<()> {
    model
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn layer_name(i: usize) -> String {
    format!("layer{i}")
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn blobs(spec: &str, a: &DataArgs) -> Result<Dataset> {
    let parts: Vec<usize> = spec
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("invalid blob spec '{spec}' (expected samples,dim,classes)"))?;
    let [samples, dim, classes] = parts[..] else {
        bail!("invalid blob spec '{spec}' (expected samples,dim,classes)");
    };
    Ok(gaussian_blobs(
        samples,
        dim,
        classes,
        a.separation,
        a.data_seed,
    )?)
}

/// Blobs split 70/15/15 into train, validation and test.
fn blob_splits(d: &Dataset, seed: u64) -> Splits {
    let test_n = d.len() * 15 / 100;
    let (test, rest) = d.shuffled_split(test_n, seed);
    let (val, train) = rest.split_at(test_n);
    Splits { train, val, test }
}

pub fn training_splits(a: &DataArgs) -> Result<Splits> {
    if let Some(dir) = &a.data {
        let (train, test) = load_digits(dir)
            .with_context(|| format!("reading IDX files from {}", dir.display()))?;
        let (val, train) = train.shuffled_split(DIGIT_VALIDATION, 0);
        return Ok(Splits { train, val, test });
    }
    if let (Some(images), Some(labels)) = (&a.images, &a.labels) {
        let all =
            load_idx(images, labels).with_context(|| format!("reading {}", images.display()))?;
        let (val, train) = all.shuffled_split(all.len() / 10, 0);
        return Ok(Splits {
            train,
            test: val.clone(),
            val,
        });
    }
    if let Some(spec) = &a.blobs {
        return Ok(blob_splits(&blobs(spec, a)?, a.data_seed));
    }
    bail!("no dataset: pass --data, --images/--labels or --blobs")
}

pub fn eval_set(a: &DataArgs) -> Result<Dataset> {
    if let Some(dir) = &a.data {
        return Ok(load_digits(dir)
            .with_context(|| format!("reading IDX files from {}", dir.display()))?
            .1);
    }
    if let (Some(images), Some(labels)) = (&a.images, &a.labels) {
        return load_idx(images, labels).with_context(|| format!("reading {}", images.display()));
    }
    if let Some(spec) = &a.blobs {
        return Ok(blob_splits(&blobs(spec, a)?, a.data_seed).test);
    }
    bail!("no dataset: pass --data, --images/--labels or --blobs")
}
