//! Structured magnitude pruning and the gradual K schedule.

use ndarray::{Array2, Zip};

use crate::code_table::CodeParams;
use crate::error::{Error, Result};
use crate::grouping::{Grouping, Orientation};

/// Boolean keep-mask with the same shape as a weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    keep: Array2<bool>,
}

impl MaskMatrix {
    pub fn from_bools(keep: Array2<bool>) -> Self {
        Self { keep }
    }

    pub fn ones(shape: (usize, usize)) -> Self {
        Self {
            keep: Array2::from_elem(shape, true),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.keep.dim()
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.keep
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.keep[[row, col]]
    }

    pub fn ones_count(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }

    /// Largest number of kept entries in any sub-vector.
    pub fn max_ones_per_subvector(&self, n: usize, orientation: Orientation) -> Result<usize> {
        let (rows, cols) = self.shape();
        let g = Grouping::new(rows, cols, n, orientation)?;
        Ok((0..g.count())
            .map(|s| (0..n).filter(|&i| self.keep[g.coord(s, i)]).count())
            .max()
            .unwrap_or(0))
    }

    pub fn satisfies(&self, params: CodeParams, orientation: Orientation) -> Result<bool> {
        Ok(self.max_ones_per_subvector(params.n(), orientation)? <= params.k())
    }
}

/// Keeps the `k` largest magnitudes of every sub-vector.
///
/// Ties keep the lower index within the sub-vector.
pub fn structured_prune(
    w: &Array2<f64>,
    params: CodeParams,
    orientation: Orientation,
) -> Result<MaskMatrix> {
    let (rows, cols) = w.dim();
    let g = Grouping::new(rows, cols, params.n(), orientation)?;
    let (n, k) = (params.n(), params.k());
    let mut keep = Array2::from_elem((rows, cols), false);
    let mut order: Vec<(usize, f64)> = Vec::with_capacity(n);
    for s in 0..g.count() {
        order.clear();
        order.extend((0..n).map(|i| (i, w[g.coord(s, i)].abs())));
        // stable sort keeps lower index first among equal magnitudes
        order.sort_by(|a, b| b.1.total_cmp(&a.1));
        for &(i, _) in order.iter().take(k) {
            keep[g.coord(s, i)] = true;
        }
    }
    Ok(MaskMatrix { keep })
}

pub fn apply_mask(w: &Array2<f64>, mask: &MaskMatrix) -> Result<Array2<f64>> {
    if w.dim() != mask.shape() {
        return Err(Error::ShapeMismatch {
            context: "apply_mask",
            expected: w.dim(),
            got: mask.shape(),
        });
    }
    let mut out = w.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place(w: &mut Array2<f64>, mask: &MaskMatrix) -> Result<()> {
    if w.dim() != mask.shape() {
        return Err(Error::ShapeMismatch {
            context: "apply_mask",
            expected: w.dim(),
            got: mask.shape(),
        });
    }
    Zip::from(w).and(&mask.keep).for_each(|x, &m| {
        if !m {
            *x = 0.0;
        }
    });
    Ok(())
}

/// A sequence of codes with fixed `n` and strictly decreasing `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsitySchedule {
    stages: Vec<CodeParams>,
    epochs: Vec<usize>,
}

impl SparsitySchedule {
    pub fn new(stages: Vec<CodeParams>, epochs: Vec<usize>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Schedule("schedule has no stages".into()));
        }
        if stages.len() != epochs.len() {
            return Err(Error::Schedule(format!(
                "{} stages but {} epoch budgets",
                stages.len(),
                epochs.len()
            )));
        }
        for w in stages.windows(2) {
            if w[0].n() != w[1].n() {
                return Err(Error::Schedule(format!(
                    "stage {} and {} differ in n",
                    w[0], w[1]
                )));
            }
            if w[1].k() >= w[0].k() {
                return Err(Error::Schedule(format!(
                    "k must strictly decrease: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { stages, epochs })
    }

    pub fn single(params: CodeParams, epochs: usize) -> Self {
        Self {
            stages: vec![params],
            epochs: vec![epochs],
        }
    }

    /// Unit decrements from `k_start` down to `k_end`, same budget per stage.
    pub fn gradual(
        n: usize,
        k_start: usize,
        k_end: usize,
        epochs_per_stage: usize,
    ) -> Result<Self> {
        if k_end > k_start {
            return Err(Error::Schedule(format!(
                "k_end {k_end} above k_start {k_start}"
            )));
        }
        let stages = (k_end..=k_start)
            .rev()
            .map(|k| CodeParams::new(n, k))
            .collect::<Result<Vec<_>>>()?;
        let epochs = vec![epochs_per_stage; stages.len()];
        Self::new(stages, epochs)
    }

    pub fn stages(&self) -> &[CodeParams] {
        &self.stages
    }

    pub fn epochs(&self, stage: usize) -> usize {
        self.epochs[stage]
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn target(&self) -> CodeParams {
        *self.stages.last().expect("non-empty")
    }

    pub fn n(&self) -> usize {
        self.stages[0].n()
    }
}

/// Re-prunes the current float weights at the next stage's `k`.
pub fn next_stage(
    schedule: &SparsitySchedule,
    current: usize,
    w_float: &Array2<f64>,
    orientation: Orientation,
) -> Result<(MaskMatrix, CodeParams)> {
    let next = current + 1;
    let params = *schedule.stages.get(next).ok_or_else(|| {
        Error::Schedule(format!(
            "no stage after {current}; schedule has {}",
            schedule.len()
        ))
    })?;
    Ok((structured_prune(w_float, params, orientation)?, params))
}
