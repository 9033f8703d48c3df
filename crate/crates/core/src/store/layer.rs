use std::fmt;

use ndarray::Array2;

use crate::code_table::{
    address_bits, count_entries, CodeParams, CodeRanker, CodeTable, SubvectorIndex,
    TernarySubvector, Trit,
};
use crate::error::{Error, Result};
use crate::grouping::{Grouping, Orientation};
use crate::store::bitpack::{pack_indices, unpack_indices, BitStream, BitWriter};

/// Storage format of one weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerFormat {
    Float32,
    /// Signed 8-bit levels in [-127, 127] times Δ.
    Fixed8,
    /// Row-major 2-bit trits: 00 zero, 01 plus, 10 minus.
    Ternary2Bit,
    Sst {
        params: CodeParams,
        orientation: Orientation,
    },
}

impl LayerFormat {
    pub fn tag(&self) -> u8 {
        match self {
            LayerFormat::Float32 => 0,
            LayerFormat::Fixed8 => 1,
            LayerFormat::Ternary2Bit => 2,
            LayerFormat::Sst { .. } => 3,
        }
    }

    pub fn has_step(&self) -> bool {
        !matches!(self, LayerFormat::Float32)
    }

    pub fn code_params(&self) -> Option<CodeParams> {
        match self {
            LayerFormat::Sst { params, .. } => Some(*params),
            _ => None,
        }
    }

    /// Payload size for a `rows x cols` matrix.
    pub fn payload_bits(&self, rows: usize, cols: usize) -> Result<u64> {
        let weights = (rows * cols) as u64;
        Ok(match self {
            LayerFormat::Float32 => 32 * weights,
            LayerFormat::Fixed8 => 8 * weights,
            LayerFormat::Ternary2Bit => 2 * weights,
            LayerFormat::Sst {
                params,
                orientation,
            } => {
                let g = Grouping::new(rows, cols, params.n(), *orientation)?;
                g.count() as u64 * address_bits(*params)? as u64
            }
        })
    }

    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if let LayerFormat::Sst {
            params,
            orientation,
        } = self
        {
            Grouping::new(rows, cols, params.n(), *orientation)?;
        }
        Ok(())
    }
}

impl fmt::Display for LayerFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerFormat::Float32 => f.write_str("float32"),
            LayerFormat::Fixed8 => f.write_str("fixed8"),
            LayerFormat::Ternary2Bit => f.write_str("ternary2bit"),
            LayerFormat::Sst {
                params,
                orientation,
            } => write!(f, "sst{params}/{orientation}"),
        }
    }
}

/// Per-layer normalizer parameters, stored as binary32.
#[derive(Debug, Clone, PartialEq)]
pub enum NormalizerParams {
    None,
    /// Inference-time batch normalization with running statistics.
    BatchNorm {
        eps: f32,
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
    /// Per-output-row scale `1 / ||w_row||`.
    WeightNorm {
        row_scale: Vec<f32>,
    },
}

impl NormalizerParams {
    pub fn tag(&self) -> u8 {
        match self {
            NormalizerParams::None => 0,
            NormalizerParams::BatchNorm { .. } => 1,
            NormalizerParams::WeightNorm { .. } => 2,
        }
    }

    /// Number of stored float values (excluding ε).
    pub fn value_count(&self) -> usize {
        match self {
            NormalizerParams::None => 0,
            NormalizerParams::BatchNorm { gamma, .. } => 4 * gamma.len(),
            NormalizerParams::WeightNorm { row_scale } => row_scale.len(),
        }
    }

    pub fn features(&self) -> Option<usize> {
        match self {
            NormalizerParams::None => None,
            NormalizerParams::BatchNorm { gamma, .. } => Some(gamma.len()),
            NormalizerParams::WeightNorm { row_scale } => Some(row_scale.len()),
        }
    }
}

/// One stored layer: weights, bias and normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedLayer {
    pub format: LayerFormat,
    pub rows: usize,
    pub cols: usize,
    /// Step size; `None` only for float32 layers.
    pub delta: Option<f32>,
    pub payload: BitStream,
    pub bias: Vec<f32>,
    pub normalizer: NormalizerParams,
}

impl EncodedLayer {
    pub fn weight_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Structural checks that do not need the code table.
    pub fn validate(&self) -> Result<()> {
        self.format.check_shape(self.rows, self.cols)?;
        let expected = self.format.payload_bits(self.rows, self.cols)?;
        if self.payload.bit_len() != expected {
            return Err(Error::Format(format!(
                "{} layer {}x{} needs {expected} payload bits, found {}",
                self.format,
                self.rows,
                self.cols,
                self.payload.bit_len()
            )));
        }
        match (self.format.has_step(), self.delta) {
            (true, Some(d)) if d.is_finite() && d > 0.0 => {}
            (true, d) => {
                return Err(Error::Format(format!(
                    "{} layer has invalid step {d:?}",
                    self.format
                )))
            }
            (false, _) => {}
        }
        if !self.bias.is_empty() && self.bias.len() != self.rows {
            return Err(Error::Format(format!(
                "bias length {} does not match {} rows",
                self.bias.len(),
                self.rows
            )));
        }
        if let Some(f) = self.normalizer.features() {
            if f != self.rows {
                return Err(Error::Format(format!(
                    "normalizer covers {f} features, layer has {} rows",
                    self.rows
                )));
            }
        }
        Ok(())
    }

    /// Sub-vector indices of an sst layer in stream order.
    pub fn indices(&self) -> Result<Vec<SubvectorIndex>> {
        let LayerFormat::Sst {
            params,
            orientation,
        } = self.format
        else {
            return Err(Error::Format(format!(
                "{} layer has no index stream",
                self.format
            )));
        };
        let g = Grouping::new(self.rows, self.cols, params.n(), orientation)?;
        unpack_indices(&self.payload, address_bits(params)?, g.count())
    }

    /// First out-of-range index as `(position, index)`.
    pub fn find_corrupt_index(&self) -> Result<Option<(usize, u64)>> {
        let Some(params) = self.format.code_params() else {
            return Ok(None);
        };
        let entries = count_entries(params)?;
        Ok(self
            .indices()?
            .iter()
            .enumerate()
            .find(|(_, ix)| ix.0 >= entries)
            .map(|(p, ix)| (p, ix.0)))
    }
}

fn off_grid(layer: usize, (row, col): (usize, usize), value: f64, delta: f64) -> Error {
    Error::OffGrid {
        layer,
        row,
        col,
        value,
        delta,
    }
}

/// Encodes quantized weights. `layer` labels errors only.
///
/// For quantized formats every weight must be exactly `level * Δ` with Δ taken
/// at binary32 precision.
pub fn encode_layer(
    w_q: &Array2<f64>,
    delta: Option<f32>,
    format: LayerFormat,
    layer: usize,
) -> Result<EncodedLayer> {
    let (rows, cols) = w_q.dim();
    format.check_shape(rows, cols)?;
    let step = match (format.has_step(), delta) {
        (true, Some(d)) if d.is_finite() && d > 0.0 => d as f64,
        (true, _) => return Err(Error::InvalidStep(delta.map_or(f64::NAN, |d| d as f64))),
        (false, _) => 1.0,
    };
    let level_of = |coord: (usize, usize), max: i64| -> Result<i64> {
        let v = w_q[coord];
        let level = (v / step).round();
        if level.abs() > max as f64 || level * step != v {
            return Err(off_grid(layer, coord, v, step));
        }
        Ok(level as i64)
    };

    let payload = match format {
        LayerFormat::Float32 => {
            let mut bytes = Vec::with_capacity(rows * cols * 4);
            for v in w_q.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            BitStream::from_parts(bytes, 32 * (rows * cols) as u64)?
        }
        LayerFormat::Fixed8 => {
            let mut bytes = Vec::with_capacity(rows * cols);
            for ((r, c), _) in w_q.indexed_iter() {
                bytes.push(level_of((r, c), 127)? as i8 as u8);
            }
            BitStream::from_parts(bytes, 8 * (rows * cols) as u64)?
        }
        LayerFormat::Ternary2Bit => {
            let mut writer = BitWriter::with_capacity_bits(2 * (rows * cols) as u64);
            for ((r, c), _) in w_q.indexed_iter() {
                let t = Trit::from_i8(level_of((r, c), 1)? as i8).expect("level within [-1, 1]");
                writer.push(t.code() as u64, 2);
            }
            writer.finish()
        }
        LayerFormat::Sst {
            params,
            orientation,
        } => {
            let g = Grouping::new(rows, cols, params.n(), orientation)?;
            let ranker = CodeRanker::new(params)?;
            let mut indices = Vec::with_capacity(g.count());
            let mut trits = Vec::with_capacity(params.n());
            for s in 0..g.count() {
                trits.clear();
                for i in 0..params.n() {
                    let level = level_of(g.coord(s, i), 1)?;
                    trits.push(Trit::from_i8(level as i8).expect("level within [-1, 1]"));
                }
                let sv = TernarySubvector::new(trits.clone());
                let ix = ranker.rank(&sv).map_err(|e| Error::InvalidSubvector {
                    layer,
                    position: s,
                    params,
                    reason: e.to_string(),
                })?;
                indices.push(ix);
            }
            pack_indices(&indices, address_bits(params)?)?
        }
    };

    Ok(EncodedLayer {
        format,
        rows,
        cols,
        delta: if format.has_step() { delta } else { None },
        payload,
        bias: Vec::new(),
        normalizer: NormalizerParams::None,
    })
}

/// Integer levels of the stored matrix (float32 layers are rejected).
pub fn decode_levels(
    layer: &EncodedLayer,
    table: Option<&CodeTable>,
    layer_ix: usize,
) -> Result<Array2<i8>> {
    let (rows, cols) = (layer.rows, layer.cols);
    match layer.format {
        LayerFormat::Float32 => Err(Error::Format("float32 layer has no integer levels".into())),
        LayerFormat::Fixed8 => {
            let bytes = layer.payload.bytes();
            Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
                bytes[r * cols + c] as i8
            }))
        }
        LayerFormat::Ternary2Bit => {
            let mut out = Array2::zeros((rows, cols));
            for (i, v) in out.iter_mut().enumerate() {
                let code = layer.payload.read(2 * i as u64, 2) as u8;
                *v = Trit::from_code(code)
                    .ok_or_else(|| {
                        Error::Format(format!(
                            "layer {layer_ix}: invalid trit code 0b11 at weight {i}"
                        ))
                    })?
                    .value();
            }
            Ok(out)
        }
        LayerFormat::Sst {
            params,
            orientation,
        } => {
            let table = table.ok_or_else(|| {
                Error::Format(format!("layer {layer_ix}: sst{params} needs a code table"))
            })?;
            if table.params() != params {
                return Err(Error::Format(format!(
                    "layer {layer_ix}: table {} does not match layer code {params}",
                    table.params()
                )));
            }
            let g = Grouping::new(rows, cols, params.n(), orientation)?;
            let mut out = Array2::zeros((rows, cols));
            let mut buf = vec![0i8; params.n()];
            for (s, ix) in layer.indices()?.into_iter().enumerate() {
                table
                    .decode_into(ix, &mut buf)
                    .map_err(|_| Error::CorruptIndex {
                        layer: layer_ix,
                        position: s,
                        index: ix.0,
                        entries: table.entry_count(),
                    })?;
                for (i, &v) in buf.iter().enumerate() {
                    out[g.coord(s, i)] = v;
                }
            }
            Ok(out)
        }
    }
}

/// Dense weights `level * Δ` (or the raw floats).
pub fn decode_layer(layer: &EncodedLayer, table: Option<&CodeTable>) -> Result<Array2<f64>> {
    decode_layer_at(layer, table, 0)
}

pub(crate) fn decode_layer_at(
    layer: &EncodedLayer,
    table: Option<&CodeTable>,
    layer_ix: usize,
) -> Result<Array2<f64>> {
    if let LayerFormat::Float32 = layer.format {
        let bytes = layer.payload.bytes();
        return Ok(Array2::from_shape_fn((layer.rows, layer.cols), |(r, c)| {
            let o = 4 * (r * layer.cols + c);
            f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64
        }));
    }
    let step = layer
        .delta
        .ok_or_else(|| Error::Format(format!("layer {layer_ix}: missing step size")))?
        as f64;
    Ok(decode_levels(layer, table, layer_ix)?.mapv(|l| l as f64 * step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code_table::build_table;
    use ndarray::array;

    fn sst(n: usize, k: usize) -> LayerFormat {
        LayerFormat::Sst {
            params: CodeParams::new(n, k).unwrap(),
            orientation: Orientation::Column,
        }
    }

    #[test]
    fn single_column_roundtrip() {
        let mut w = Array2::zeros((8, 1));
        w[[2, 0]] = 0.5;
        let layer = encode_layer(&w, Some(0.5), sst(8, 1), 0).unwrap();
        assert_eq!(layer.payload.bit_len(), 5);
        let table = build_table(CodeParams::new(8, 1).unwrap()).unwrap();
        assert_eq!(decode_layer(&layer, Some(&table)).unwrap(), w);
    }

    #[test]
    fn zero_matrix_gives_zero_indices() {
        let w = Array2::zeros((16, 16));
        let layer = encode_layer(&w, Some(1.0), sst(16, 4), 0).unwrap();
        let ix = layer.indices().unwrap();
        assert_eq!(ix.len(), 16);
        assert!(ix.iter().all(|i| i.0 == 0));
        let table = build_table(CodeParams::new(16, 4).unwrap()).unwrap();
        assert_eq!(decode_layer(&layer, Some(&table)).unwrap(), w);
    }

    #[test]
    fn large_layer_payload_size() {
        let w = Array2::zeros((1024, 1024));
        let layer = encode_layer(&w, Some(1.0), sst(8, 1), 0).unwrap();
        assert_eq!(layer.payload.bit_len(), 655_360);
        assert_eq!(layer.payload.bytes().len(), 81_920);
    }

    #[test]
    fn figure_vector_under_eight_four() {
        let v = [0.0, 1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0];
        let w = Array2::from_shape_vec((8, 1), v.to_vec()).unwrap();
        let layer = encode_layer(&w, Some(1.0), sst(8, 4), 0).unwrap();
        assert_eq!(layer.indices().unwrap().len(), 1);
        let table = build_table(CodeParams::new(8, 4).unwrap()).unwrap();
        assert_eq!(decode_layer(&layer, Some(&table)).unwrap(), w);
    }

    #[test]
    fn budget_violation_names_position() {
        let mut w = Array2::zeros((8, 2));
        w[[0, 1]] = 0.5;
        w[[3, 1]] = -0.5;
        match encode_layer(&w, Some(0.5), sst(8, 1), 7) {
            Err(Error::InvalidSubvector {
                layer: 7,
                position: 1,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_divisible_and_off_grid() {
        let w = Array2::zeros((6, 2));
        assert!(matches!(
            encode_layer(&w, Some(1.0), sst(4, 1), 0),
            Err(Error::NotDivisible { .. })
        ));
        let w = array![[0.3, 0.0]];
        assert!(matches!(
            encode_layer(&w, Some(0.5), LayerFormat::Ternary2Bit, 0),
            Err(Error::OffGrid { .. })
        ));
        let w = array![[1.0, 0.0]];
        assert!(matches!(
            encode_layer(&w, Some(0.5), LayerFormat::Ternary2Bit, 0),
            Err(Error::OffGrid { .. })
        ));
        assert!(encode_layer(&w, None, LayerFormat::Ternary2Bit, 0).is_err());
    }

    #[test]
    fn dense_formats_roundtrip() {
        let w = array![[0.5, -0.5, 0.0], [0.0, 0.5, -0.5]];
        let t = encode_layer(&w, Some(0.5), LayerFormat::Ternary2Bit, 0).unwrap();
        assert_eq!(t.payload.bit_len(), 12);
        assert_eq!(decode_layer(&t, None).unwrap(), w);

        let w8 = array![[0.25 * 127.0, -0.25 * 127.0, 0.25], [0.0, -0.5, 3.0]];
        let f = encode_layer(&w8, Some(0.25), LayerFormat::Fixed8, 0).unwrap();
        assert_eq!(decode_layer(&f, None).unwrap(), w8);

        let wf = array![[1.5, -2.25], [1e-3_f32 as f64, 7.0]];
        let f = encode_layer(&wf, None, LayerFormat::Float32, 0).unwrap();
        assert_eq!(f.delta, None);
        assert_eq!(decode_layer(&f, None).unwrap(), wf);
    }

    #[test]
    fn table_mismatch() {
        let w = Array2::zeros((8, 1));
        let layer = encode_layer(&w, Some(1.0), sst(8, 1), 0).unwrap();
        let other = build_table(CodeParams::new(8, 2).unwrap()).unwrap();
        assert!(decode_layer(&layer, Some(&other)).is_err());
        assert!(decode_layer(&layer, None).is_err());
    }

    #[test]
    fn corrupt_index_detected() {
        let w = Array2::zeros((8, 4));
        let mut layer = encode_layer(&w, Some(1.0), sst(8, 1), 3).unwrap();
        // index 2 occupies bits 10..15; setting its MSB gives 16 < 17, so set bits for 31
        for b in 10..15 {
            layer.payload.flip_bit(b);
        }
        assert_eq!(layer.find_corrupt_index().unwrap(), Some((2, 31)));
        let table = build_table(CodeParams::new(8, 1).unwrap()).unwrap();
        assert!(matches!(
            decode_layer_at(&layer, Some(&table), 3),
            Err(Error::CorruptIndex {
                layer: 3,
                position: 2,
                index: 31,
                entries: 17
            })
        ));
    }
}
