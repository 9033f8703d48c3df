//! Multiplication-free inference straight from index streams.
//!
//! A column-oriented sst layer is split into processing-element groups, each
//! owning `n` consecutive outputs. For every input column a group looks up
//! its sub-vector and adds or subtracts `x[j]` into the accumulators picked
//! by the cached non-zero positions. Δ is applied once per output at the end.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::code_table::{CodeParams, CodeTable, NonZero};
use crate::error::{Error, Result};
use crate::grouping::Orientation;
use crate::store::layer::{decode_layer_at, EncodedLayer, LayerFormat, NormalizerParams};
use crate::store::model::{ModelFile, TableCache};
use crate::trainer::network::softmax;

/// An sst layer with its resolved table and pre-read indices.
#[derive(Debug, Clone)]
pub struct CompressedFcLayer {
    params: CodeParams,
    orientation: Orientation,
    rows: usize,
    cols: usize,
    delta: f64,
    bias: Vec<f64>,
    table: Arc<CodeTable>,
    /// Sub-vector indices in stream order, all below the entry count.
    indices: Vec<u32>,
}

/// One processing element: `n` accumulators for a disjoint output range.
#[derive(Debug, Clone, PartialEq)]
pub struct PeGroup<A> {
    pub id: usize,
    pub outputs: Range<usize>,
    pub accumulators: Vec<A>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeTrace {
    pub lookups: u64,
    pub add_sub: u64,
    pub skipped_zeros: u64,
    /// Most operations issued for a single sub-vector.
    pub max_ops_per_subvector: u64,
    pub budget: u64,
}

impl PeTrace {
    pub fn within_budget(&self) -> bool {
        self.max_ops_per_subvector <= self.budget
    }
}

impl CompressedFcLayer {
    pub fn new(layer: &EncodedLayer, table: Arc<CodeTable>) -> Result<Self> {
        Self::new_at(layer, table, 0)
    }

    fn new_at(layer: &EncodedLayer, table: Arc<CodeTable>, layer_ix: usize) -> Result<Self> {
        let LayerFormat::Sst {
            params,
            orientation,
        } = layer.format
        else {
            return Err(Error::Format(format!(
                "layer {layer_ix}: {} is not an sst layer",
                layer.format
            )));
        };
        layer.validate()?;
        if table.params() != params {
            return Err(Error::Format(format!(
                "layer {layer_ix}: table {} does not match {params}",
                table.params()
            )));
        }
        let entries = table.entry_count();
        let indices = layer
            .indices()?
            .into_iter()
            .enumerate()
            .map(|(position, ix)| {
                if ix.0 >= entries {
                    Err(Error::CorruptIndex {
                        layer: layer_ix,
                        position,
                        index: ix.0,
                        entries,
                    })
                } else {
                    Ok(ix.0 as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            orientation,
            rows: layer.rows,
            cols: layer.cols,
            delta: layer.delta.expect("validated sst layer has a step") as f64,
            bias: layer.bias.iter().map(|&b| b as f64).collect(),
            table,
            indices,
        })
    }

    pub fn params(&self) -> CodeParams {
        self.params
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.cols {
            return Err(Error::ShapeMismatch {
                context: "compressed matvec input",
                expected: (self.cols, 1),
                got: (len, 1),
            });
        }
        Ok(())
    }

    fn nonzeros(&self, s: usize) -> &[NonZero] {
        self.table.nonzeros(self.indices[s] as usize)
    }

    /// Runs the add/subtract dataflow with accumulator type `A`.
    fn accumulate<A, F>(
        &self,
        x: &[F],
        zero: A,
        add: impl Fn(&mut A, F),
        sub: impl Fn(&mut A, F),
    ) -> Vec<PeGroup<A>>
    where
        A: Clone,
        F: Copy,
    {
        let n = self.params.n();
        match self.orientation {
            Orientation::Column => {
                let per_col = self.rows / n;
                (0..per_col)
                    .map(|p| {
                        let mut acc = vec![zero.clone(); n];
                        for (j, &xj) in x.iter().enumerate() {
                            for nz in self.nonzeros(j * per_col + p) {
                                let a = &mut acc[nz.position as usize];
                                if nz.negative {
                                    sub(a, xj)
                                } else {
                                    add(a, xj)
                                }
                            }
                        }
                        PeGroup {
                            id: p,
                            outputs: p * n..(p + 1) * n,
                            accumulators: acc,
                        }
                    })
                    .collect()
            }
            Orientation::Row => {
                let per_row = self.cols / n;
                (0..self.rows)
                    .map(|r| {
                        let mut acc = zero.clone();
                        for g in 0..per_row {
                            for nz in self.nonzeros(r * per_row + g) {
                                let xj = x[g * n + nz.position as usize];
                                if nz.negative {
                                    sub(&mut acc, xj)
                                } else {
                                    add(&mut acc, xj)
                                }
                            }
                        }
                        PeGroup {
                            id: r,
                            outputs: r..r + 1,
                            accumulators: vec![acc],
                        }
                    })
                    .collect()
            }
        }
    }

    fn gather<A: Copy + Default>(&self, groups: Vec<PeGroup<A>>) -> Vec<A> {
        let mut out = vec![A::default(); self.rows];
        for g in groups {
            out[g.outputs].copy_from_slice(&g.accumulators);
        }
        out
    }

    /// Integer dot products of the ternary levels with `x`, before Δ and bias.
    pub fn accumulate_int(&self, x: &[i64]) -> Result<Vec<i64>> {
        self.check_len(x.len())?;
        let groups = self.accumulate(x, 0i64, |a, v| *a += v, |a, v| *a -= v);
        Ok(self.gather(groups))
    }

    /// Level sums `Σ ±x[j]` in f64, before Δ and bias.
    pub fn accumulate_real(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        let groups = self.accumulate(x, 0.0f64, |a, v| *a += v, |a, v| *a -= v);
        Ok(self.gather(groups))
    }

    /// `W x + b` with one multiplication by Δ per output.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut acc = self.accumulate_real(x)?;
        for (r, a) in acc.iter_mut().enumerate() {
            *a = *a * self.delta + self.bias.get(r).copied().unwrap_or(0.0);
        }
        Ok(acc)
    }

    pub fn trace(&self, x: &[f64]) -> Result<PeTrace> {
        self.check_len(x.len())?;
        let n = self.params.n() as u64;
        let mut t = PeTrace {
            budget: self.params.k() as u64,
            ..Default::default()
        };
        for s in 0..self.indices.len() {
            let ops = self.nonzeros(s).len() as u64;
            t.lookups += 1;
            t.add_sub += ops;
            t.skipped_zeros += n - ops;
            t.max_ops_per_subvector = t.max_ops_per_subvector.max(ops);
        }
        Ok(t)
    }
}

pub fn compressed_matvec(layer: &CompressedFcLayer, x: &[f64]) -> Result<Vec<f64>> {
    layer.matvec(x)
}

pub fn pe_trace(layer: &CompressedFcLayer, x: &[f64]) -> Result<PeTrace> {
    layer.trace(x)
}

/// Plain `W x`, summed left to right.
pub fn dense_matvec(w: &Array2<f64>, x: &[f64]) -> Result<Vec<f64>> {
    if w.ncols() != x.len() {
        return Err(Error::ShapeMismatch {
            context: "dense matvec",
            expected: (w.nrows(), w.ncols()),
            got: (w.nrows(), x.len()),
        });
    }
    Ok(w.rows()
        .into_iter()
        .map(|row| row.iter().zip(x).fold(0.0, |s, (a, b)| s + a * b))
        .collect())
}

#[derive(Debug, Clone)]
enum Weights {
    Compressed(CompressedFcLayer),
    Dense { w: Array2<f64>, bias: Array1<f64> },
}

#[derive(Debug, Clone)]
struct CompiledLayer {
    weights: Weights,
    /// Weight-norm scale applied to `W x` before the bias.
    row_scale: Option<Vec<f64>>,
    /// Folded batch norm: `out = net * scale + shift`.
    affine: Option<(Vec<f64>, Vec<f64>)>,
    softmax: bool,
}

impl CompiledLayer {
    fn outputs(&self) -> usize {
        match &self.weights {
            Weights::Compressed(c) => c.rows,
            Weights::Dense { w, .. } => w.nrows(),
        }
    }

    fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = match (&self.weights, &self.row_scale) {
            (Weights::Compressed(c), None) => c.matvec(y)?,
            (Weights::Compressed(c), Some(rs)) => {
                let mut acc = c.accumulate_real(y)?;
                for (r, a) in acc.iter_mut().enumerate() {
                    *a = *a * c.delta * rs[r] + c.bias.get(r).copied().unwrap_or(0.0);
                }
                acc
            }
            (Weights::Dense { w, bias }, rs) => {
                let mut v = dense_matvec(w, y)?;
                for (r, a) in v.iter_mut().enumerate() {
                    if let Some(rs) = rs {
                        *a *= rs[r];
                    }
                    *a += bias[r];
                }
                v
            }
        };
        if let Some((scale, shift)) = &self.affine {
            for ((o, s), t) in out.iter_mut().zip(scale).zip(shift) {
                *o = *o * s + t;
            }
        }
        Ok(if self.softmax {
            softmax(&Array2::from_shape_vec((1, out.len()), out).expect("row vector"))
                .into_raw_vec_and_offset()
                .0
        } else {
            out.into_iter().map(|v| v.max(0.0)).collect()
        })
    }
}

/// A model prepared for repeated inference. Hidden layers use ReLU and the
/// last layer softmax.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    layers: Vec<CompiledLayer>,
}

impl CompiledModel {
    pub fn new(model: &ModelFile) -> Result<Self> {
        model.validate()?;
        let mut tables = TableCache::new();
        let last = model.layers.len().saturating_sub(1);
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, l) in model.layers.iter().enumerate() {
            if i > 0 && model.layers[i - 1].rows != l.cols {
                return Err(Error::Network(format!(
                    "layer {i}: input {} does not match previous output {}",
                    l.cols,
                    model.layers[i - 1].rows
                )));
            }
            let table = l.format.code_params().map(|p| tables.get(p)).transpose()?;
            let weights = match &table {
                Some(t) => Weights::Compressed(CompressedFcLayer::new_at(l, t.clone(), i)?),
                None => Weights::Dense {
                    w: decode_layer_at(l, None, i)?,
                    bias: if l.bias.is_empty() {
                        Array1::zeros(l.rows)
                    } else {
                        l.bias.iter().map(|&b| b as f64).collect()
                    },
                },
            };
            let (row_scale, affine) = match &l.normalizer {
                NormalizerParams::None => (None, None),
                NormalizerParams::BatchNorm {
                    eps,
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let scale: Vec<f64> = gamma
                        .iter()
                        .zip(var)
                        .map(|(&g, &v)| g as f64 / (v as f64 + *eps as f64).sqrt())
                        .collect();
                    let shift = beta
                        .iter()
                        .zip(mean)
                        .zip(&scale)
                        .map(|((&b, &m), s)| b as f64 - m as f64 * s)
                        .collect();
                    (None, Some((scale, shift)))
                }
                NormalizerParams::WeightNorm { .. } => {
                    // recomputed at full precision from the stored weights
                    let dense = decode_layer_at(l, table.as_deref(), i)?;
                    let mut scale = Vec::with_capacity(l.rows);
                    for (r, row) in dense.rows().into_iter().enumerate() {
                        let norm = row.dot(&row).sqrt();
                        if norm == 0.0 {
                            return Err(Error::ZeroNormRow { row: r });
                        }
                        scale.push(1.0 / norm);
                    }
                    (Some(scale), None)
                }
            };
            layers.push(CompiledLayer {
                weights,
                row_scale,
                affine,
                softmax: i == last,
            });
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(|l| match &l.weights {
            Weights::Compressed(c) => c.cols,
            Weights::Dense { w, .. } => w.ncols(),
        })
    }

    /// Class probabilities for one sample.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = x.to_vec();
        for l in &self.layers {
            y = l.apply(&y)?;
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let outputs = self.layers.last().map_or(x.ncols(), CompiledLayer::outputs);
        let mut out = Array2::zeros((x.nrows(), outputs));
        for (i, row) in x.rows().into_iter().enumerate() {
            let p = self.forward_one(&row.to_vec())?;
            out.row_mut(i).assign(&Array1::from(p));
        }
        Ok(out)
    }
}

/// Class probabilities for every row of `x`.
pub fn compressed_forward(model: &ModelFile, x: &Array2<f64>) -> Result<Array2<f64>> {
    CompiledModel::new(model)?.forward(x)
}
