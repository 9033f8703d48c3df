//! The on-disk model container.
//!
//! ```text
//! header   magic "SSTW\r\n\x1a\n" (8 bytes) | version u16 | layer count u16
//! layer    format tag u8 | orientation u8 | rows u32 | cols u32 | n u8 | k u8
//!          | step f32 | bias len u32 | bias f32 * len
//!          | payload bit length u64 | payload bytes (ceil(bits / 8))
//!          | normalizer tag u8 [| features u32 | values]
//! trailer  seed u64 | history len u16 | (n u8, k u8) * len
//! ```
//!
//! Integers and floats are little-endian. Index payloads are MSB-first.
//! Batch-norm blocks hold ε then γ, β, running mean and running variance;
//! weight-norm blocks hold one scale per output row. Code tables are not
//! stored: the canonical order regenerates them from (n, k).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

use crate::code_table::{CodeParams, CodeTable};
use crate::error::{Error, Result};
use crate::grouping::Orientation;
use crate::store::bitpack::BitStream;
use crate::store::layer::{decode_layer_at, EncodedLayer, LayerFormat, NormalizerParams};

pub const MAGIC: [u8; 8] = *b"SSTW\r\n\x1a\n";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelMetadata {
    pub seed: u64,
    /// Codes applied in order, e.g. a gradual schedule.
    pub history: Vec<CodeParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub version: u16,
    pub layers: Vec<EncodedLayer>,
    pub metadata: ModelMetadata,
}

impl Default for ModelFile {
    fn default() -> Self {
        Self {
            version: FORMAT_VERSION,
            layers: Vec::new(),
            metadata: ModelMetadata::default(),
        }
    }
}

impl ModelFile {
    pub fn new(layers: Vec<EncodedLayer>, metadata: ModelMetadata) -> Self {
        Self {
            version: FORMAT_VERSION,
            layers,
            metadata,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "{} layers exceed the u16 layer count",
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()
                .map_err(|e| Error::Format(format!("layer {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for layer in &self.layers {
            write_layer(&mut out, layer)?;
        }
        out.extend_from_slice(&self.metadata.seed.to_le_bytes());
        let hist = &self.metadata.history;
        if hist.len() > u16::MAX as usize {
            return Err(Error::Format("history too long".into()));
        }
        out.extend_from_slice(&(hist.len() as u16).to_le_bytes());
        for p in hist {
            out.push(p.n() as u8);
            out.push(p.k() as u8);
        }
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u16()? as usize;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            layers.push(read_layer(&mut r).map_err(|e| Error::Format(format!("layer {i}: {e}")))?);
        }
        let seed = r.u64()?;
        let hist_len = r.u16()? as usize;
        let mut history = Vec::with_capacity(hist_len);
        for _ in 0..hist_len {
            let n = r.u8()? as usize;
            let k = r.u8()? as usize;
            history.push(CodeParams::new(n, k)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let model = Self {
            version,
            layers,
            metadata: ModelMetadata { seed, history },
        };
        model.validate()?;
        Ok(model)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.serialize()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::deserialize(&fs::read(path)?)
    }

    /// Distinct codes used by sst layers.
    pub fn code_params(&self) -> Vec<CodeParams> {
        let mut v: Vec<CodeParams> = self
            .layers
            .iter()
            .filter_map(|l| l.format.code_params())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    /// Dense weights of every layer.
    pub fn decode_weights(&self, tables: &mut TableCache) -> Result<Vec<Array2<f64>>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let table = match l.format.code_params() {
                    Some(p) => Some(tables.get(p)?),
                    None => None,
                };
                decode_layer_at(l, table.as_deref(), i)
            })
            .collect()
    }
}

/// Tables regenerated on demand, one per code.
#[derive(Debug, Default)]
pub struct TableCache {
    tables: HashMap<CodeParams, Arc<CodeTable>>,
}

impl TableCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, params: CodeParams) -> Result<Arc<CodeTable>> {
        if let Some(t) = self.tables.get(&params) {
            return Ok(t.clone());
        }
        let t = Arc::new(CodeTable::build(params)?);
        self.tables.insert(params, t.clone());
        Ok(t)
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_layer(out: &mut Vec<u8>, l: &EncodedLayer) -> Result<()> {
    let dim = |d: usize| {
        u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))
    };
    out.push(l.format.tag());
    let (orientation, n, k) = match l.format {
        LayerFormat::Sst {
            params,
            orientation,
        } => (orientation.tag(), params.n() as u8, params.k() as u8),
        _ => (0, 0, 0),
    };
    out.push(orientation);
    out.extend_from_slice(&dim(l.rows)?.to_le_bytes());
    out.extend_from_slice(&dim(l.cols)?.to_le_bytes());
    out.push(n);
    out.push(k);
    out.extend_from_slice(&l.delta.unwrap_or(0.0).to_le_bytes());
    out.extend_from_slice(&dim(l.bias.len())?.to_le_bytes());
    put_f32s(out, &l.bias);
    out.extend_from_slice(&l.payload.bit_len().to_le_bytes());
    out.extend_from_slice(l.payload.bytes());
    out.push(l.normalizer.tag());
    match &l.normalizer {
        NormalizerParams::None => {}
        NormalizerParams::BatchNorm {
            eps,
            gamma,
            beta,
            mean,
            var,
        } => {
            let f = gamma.len();
            if beta.len() != f || mean.len() != f || var.len() != f {
                return Err(Error::Format("batch-norm vectors differ in length".into()));
            }
            out.extend_from_slice(&dim(f)?.to_le_bytes());
            out.extend_from_slice(&eps.to_le_bytes());
            for v in [gamma, beta, mean, var] {
                put_f32s(out, v);
            }
        }
        NormalizerParams::WeightNorm { row_scale } => {
            out.extend_from_slice(&dim(row_scale.len())?.to_le_bytes());
            put_f32s(out, row_scale);
        }
    }
    Ok(())
}

fn read_layer(r: &mut Reader<'_>) -> Result<EncodedLayer> {
    let tag = r.u8()?;
    let orientation_tag = r.u8()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = r.u8()? as usize;
    let k = r.u8()? as usize;
    let delta = r.f32()?;
    let format = match tag {
        0 => LayerFormat::Float32,
        1 => LayerFormat::Fixed8,
        2 => LayerFormat::Ternary2Bit,
        3 => LayerFormat::Sst {
            params: CodeParams::new(n, k)?,
            orientation: Orientation::from_tag(orientation_tag)
                .ok_or_else(|| Error::Format(format!("bad orientation tag {orientation_tag}")))?,
        },
        t => return Err(Error::Format(format!("unknown format tag {t}"))),
    };
    let bias_len = r.u32()? as usize;
    let bias = r.f32s(bias_len)?;
    let bit_len = r.u64()?;
    let byte_len = usize::try_from(bit_len.div_ceil(8))
        .map_err(|_| Error::Format("payload too large".into()))?;
    let payload = BitStream::from_parts(r.take(byte_len)?.to_vec(), bit_len)?;
    let normalizer = match r.u8()? {
        0 => NormalizerParams::None,
        1 => {
            let f = r.u32()? as usize;
            let eps = r.f32()?;
            NormalizerParams::BatchNorm {
                eps,
                gamma: r.f32s(f)?,
                beta: r.f32s(f)?,
                mean: r.f32s(f)?,
                var: r.f32s(f)?,
            }
        }
        2 => {
            let f = r.u32()? as usize;
            NormalizerParams::WeightNorm {
                row_scale: r.f32s(f)?,
            }
        }
        t => return Err(Error::Format(format!("unknown normalizer tag {t}"))),
    };
    Ok(EncodedLayer {
        format,
        rows,
        cols,
        delta: if format.has_step() { Some(delta) } else { None },
        payload,
        bias,
        normalizer,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: need {len} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}
