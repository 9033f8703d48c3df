//! Storage accounting and compression ratios.
//!
//! The compressed size of a model is its index/weight payloads, one 32-bit
//! step per quantized layer, each distinct code table once, and the float32
//! biases and normalizer parameters. The baseline stores every weight, bias
//! and normalizer value as float32.

use std::collections::BTreeSet;

use crate::code_table::{table_storage_bits, CodeParams};
use crate::error::Result;
use crate::grouping::Orientation;
use crate::store::layer::LayerFormat;
use crate::store::model::ModelFile;

const MIB: f64 = 1024.0 * 1024.0;

/// Shape-only view of a layer, enough for storage arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub name: String,
    pub format: LayerFormat,
    pub rows: usize,
    pub cols: usize,
    pub bias_len: usize,
    /// Stored float values of the normalizer (BN: 4 per feature).
    pub normalizer_values: usize,
}

impl LayerLayout {
    pub fn weights(&self) -> u64 {
        (self.rows * self.cols) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportOptions {
    pub include_table: bool,
    pub include_bias: bool,
    pub include_normalizers: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            include_table: true,
            include_bias: true,
            include_normalizers: true,
        }
    }
}

impl ReportOptions {
    /// Weight payloads only: no tables, biases, normalizers.
    pub fn weights_only() -> Self {
        Self {
            include_table: false,
            include_bias: false,
            include_normalizers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStorage {
    pub name: String,
    pub format: LayerFormat,
    pub weights: u64,
    pub payload_bits: u64,
    pub step_bits: u64,
    pub bias_bits: u64,
    pub normalizer_bits: u64,
    pub float_bits: u64,
}

impl LayerStorage {
    pub fn compressed_bits(&self) -> u64 {
        self.payload_bits + self.step_bits + self.bias_bits + self.normalizer_bits
    }

    pub fn payload_bits_per_weight(&self) -> f64 {
        self.payload_bits as f64 / self.weights as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub options: ReportOptions,
    pub layers: Vec<LayerStorage>,
    /// Table storage per distinct code, counted once each.
    pub tables: Vec<(CodeParams, u64)>,
    pub compressed_bits: u64,
    pub float_bits: u64,
}

impl StorageReport {
    pub fn from_layouts(layouts: &[LayerLayout], options: ReportOptions) -> Result<Self> {
        let mut layers = Vec::with_capacity(layouts.len());
        let mut codes = BTreeSet::new();
        for l in layouts {
            let payload_bits = l.format.payload_bits(l.rows, l.cols)?;
            let bias_bits = if options.include_bias {
                32 * l.bias_len as u64
            } else {
                0
            };
            let normalizer_bits = if options.include_normalizers {
                32 * l.normalizer_values as u64
            } else {
                0
            };
            // the per-layer step is a high-precision scalar, grouped with biases
            let step_bits = if l.format.has_step() && options.include_bias {
                32
            } else {
                0
            };
            if let Some(p) = l.format.code_params() {
                codes.insert(p);
            }
            layers.push(LayerStorage {
                name: l.name.clone(),
                format: l.format,
                weights: l.weights(),
                payload_bits,
                step_bits,
                bias_bits,
                normalizer_bits,
                float_bits: 32 * l.weights() + bias_bits + normalizer_bits,
            });
        }
        let tables = if options.include_table {
            codes
                .into_iter()
                .map(|p| Ok((p, table_storage_bits(p)?)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let compressed_bits = layers
            .iter()
            .map(LayerStorage::compressed_bits)
            .sum::<u64>()
            + tables.iter().map(|t| t.1).sum::<u64>();
        let float_bits = layers.iter().map(|l| l.float_bits).sum();
        Ok(Self {
            options,
            layers,
            tables,
            compressed_bits,
            float_bits,
        })
    }

    pub fn for_model(model: &ModelFile, options: ReportOptions) -> Result<Self> {
        Self::from_layouts(&layouts_of(model), options)
    }

    pub fn table_bits(&self) -> u64 {
        self.tables.iter().map(|t| t.1).sum()
    }

    pub fn ratio(&self) -> f64 {
        if self.compressed_bits == 0 {
            return 1.0;
        }
        self.float_bits as f64 / self.compressed_bits as f64
    }

    pub fn compressed_bytes(&self) -> f64 {
        self.compressed_bits as f64 / 8.0
    }

    pub fn float_bytes(&self) -> f64 {
        self.float_bits as f64 / 8.0
    }

    pub fn compressed_mib(&self) -> f64 {
        self.compressed_bytes() / MIB
    }

    pub fn float_mib(&self) -> f64 {
        self.float_bytes() / MIB
    }

    pub fn compressed_mb(&self) -> f64 {
        self.compressed_bytes() / 1e6
    }

    pub fn float_mb(&self) -> f64 {
        self.float_bytes() / 1e6
    }
}

pub fn storage_report(model: &ModelFile, options: ReportOptions) -> Result<StorageReport> {
    StorageReport::for_model(model, options)
}

pub fn layouts_of(model: &ModelFile) -> Vec<LayerLayout> {
    model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerLayout {
            name: format!("layer{i}"),
            format: l.format,
            rows: l.rows,
            cols: l.cols,
            bias_len: l.bias.len(),
            normalizer_values: l.normalizer.value_count(),
        })
        .collect()
}

/// Layer shapes of VGG-9 for 32x32x3 inputs:
/// `(2x128C3)-MP2-(2x256C3)-MP2-(2x512C3)-MP2-(2x1024FC)-10`.
///
/// Convolutions are stored as `out x (in * 9)` blocks with batch norm and
/// `conv_format`; the two hidden FC layers use `fc_format` with batch norm;
/// the output layer uses `output_format` without a normalizer.
pub fn vgg9_layouts(
    conv_format: LayerFormat,
    fc_format: LayerFormat,
    output_format: LayerFormat,
) -> Vec<LayerLayout> {
    let convs = [
        (3, 128),
        (128, 128),
        (128, 256),
        (256, 256),
        (256, 512),
        (512, 512),
    ];
    let mut out: Vec<LayerLayout> = convs
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout))| LayerLayout {
            name: format!("conv{}", i + 1),
            format: conv_format,
            rows: cout,
            cols: cin * 9,
            bias_len: cout,
            normalizer_values: 4 * cout,
        })
        .collect();
    for (i, (cin, cout)) in [(512 * 4 * 4, 1024), (1024, 1024)].into_iter().enumerate() {
        out.push(LayerLayout {
            name: format!("fc{}", i + 1),
            format: fc_format,
            rows: cout,
            cols: cin,
            bias_len: cout,
            normalizer_values: 4 * cout,
        });
    }
    out.push(LayerLayout {
        name: "fc3".into(),
        format: output_format,
        rows: 10,
        cols: 1024,
        bias_len: 10,
        normalizer_values: 0,
    });
    out
}

pub fn sst_column(n: usize, k: usize) -> Result<LayerFormat> {
    Ok(LayerFormat::Sst {
        params: CodeParams::new(n, k)?,
        orientation: Orientation::Column,
    })
}
