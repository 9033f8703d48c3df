use std::fs;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde_json::json;
use sst_core::grouping::Grouping;
use sst_core::pruner::structured_prune;
use sst_core::quantizer::{quantize_layer, QuantizerConfig, StepSize};
use sst_core::store::{
    encode_layer, EncodedLayer, LayerFormat, ModelFile, ModelMetadata, NormalizerParams,
    ReportOptions, StorageReport, TableCache, MAGIC,
};
use sst_core::Error;

use super::{layer_name, read_model, write_model};
use crate::config::{parse_raw, write_raw, FormatChoice, Policy, RawLayer};
use crate::output::Printer;
use crate::{CompressArgs, DecompressArgs, PolicyArgs};

fn load_policy(a: &PolicyArgs) -> Result<Policy> {
    if let Some(path) = &a.policy {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Policy::parse(&text).with_context(|| format!("policy {}", path.display()));
    }
    if let Some(params) = a.code {
        return Ok(Policy::uniform(FormatChoice::Sst {
            params,
            orientation: a.orientation,
        }));
    }
    match a.layer_format.as_deref() {
        Some("float" | "float32") => Ok(Policy::uniform(FormatChoice::Float)),
        Some("fixed8") => Ok(Policy::uniform(FormatChoice::Fixed8)),
        Some("ternary") => Ok(Policy::uniform(FormatChoice::Ternary)),
        Some(other) => bail!("unknown layer format '{other}' (expected float, fixed8 or ternary)"),
        None => bail!("no policy: pass --policy, --code or --layer-format"),
    }
}

/// Reads a model file, or raw matrix text when the magic is absent.
fn load_input(path: &std::path::Path) -> Result<ModelFile> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(&MAGIC) {
        return ModelFile::deserialize(&bytes)
            .with_context(|| format!("parsing {}", path.display()));
    }
    let text = String::from_utf8(bytes)
        .with_context(|| format!("{} is neither a model nor raw text", path.display()))?;
    let raw = parse_raw(&text).with_context(|| format!("parsing {}", path.display()))?;
    let layers = raw
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let mut enc = encode_layer(&l.weights, None, LayerFormat::Float32, i)?;
            enc.bias = l.bias;
            Ok(enc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelFile::new(layers, ModelMetadata::default()))
}

fn quantize(
    w: &Array2<f64>,
    mask: Option<&sst_core::pruner::MaskMatrix>,
    cfg: &QuantizerConfig,
) -> Result<(Array2<f64>, StepSize)> {
    match quantize_layer(w, mask, cfg) {
        Err(Error::AllZero) => Ok((Array2::zeros(w.dim()), StepSize::new(1.0)?)),
        r => Ok(r?),
    }
}

/// Quantized weights and step for one layer under `choice`.
fn compress_weights(w: &Array2<f64>, choice: FormatChoice) -> Result<(Array2<f64>, Option<f32>)> {
    let (wq, delta) = match choice {
        FormatChoice::Float => return Ok((w.clone(), None)),
        FormatChoice::Fixed8 => quantize(w, None, &QuantizerConfig::fixed8())?,
        FormatChoice::Ternary => quantize(w, None, &QuantizerConfig::ternary())?,
        FormatChoice::Sst {
            params,
            orientation,
        } => {
            Grouping::new(w.nrows(), w.ncols(), params.n(), orientation)?;
            let mask = structured_prune(w, params, orientation)?;
            quantize(w, Some(&mask), &QuantizerConfig::ternary())?
        }
    };
    Ok((wq, Some(delta.get() as f32)))
}

fn renormalize(normalizer: &NormalizerParams, wq: &Array2<f64>) -> Result<NormalizerParams> {
    let NormalizerParams::WeightNorm { .. } = normalizer else {
        return Ok(normalizer.clone());
    };
    let mut row_scale = Vec::with_capacity(wq.nrows());
    for (r, row) in wq.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { row: r }.into());
        }
        row_scale.push((1.0 / norm) as f32);
    }
    Ok(NormalizerParams::WeightNorm { row_scale })
}

pub fn compress_model(input: &ModelFile, policy: &Policy) -> Result<ModelFile> {
    let choices = (0..input.layers.len())
        .map(|i| policy.resolve(&layer_name(i)))
        .collect::<Result<Vec<_>>>()?;
    let weights = input.decode_weights(&mut TableCache::new())?;
    let mut layers = Vec::with_capacity(input.layers.len());
    for (i, ((src, w), choice)) in input.layers.iter().zip(&weights).zip(choices).enumerate() {
        let name = layer_name(i);
        let (wq, delta) =
            compress_weights(w, choice).with_context(|| format!("{name}: {choice}"))?;
        let mut enc = encode_layer(&wq, delta, choice.layer_format(), i)
            .with_context(|| format!("{name}: {choice}"))?;
        enc.bias = src.bias.clone();
        enc.normalizer =
            renormalize(&src.normalizer, &wq).with_context(|| format!("{name}: weight norm"))?;
        layers.push(enc);
    }
    let mut metadata = input.metadata.clone();
    for code in layers.iter().filter_map(|l| l.format.code_params()) {
        if metadata.history.last() != Some(&code) {
            metadata.history.push(code);
        }
    }
    let model = ModelFile::new(layers, metadata);
    model.validate()?;
    Ok(model)
}

pub fn print_report(report: &StorageReport, out: Printer) {
    out.note(&format!(
        "{:<10} {:<22} {:>10} {:>14} {:>8}",
        "layer", "format", "weights", "payload B", "bits/w"
    ));
    for l in &report.layers {
        out.emit(
            json!({
                "layer": l.name, "format": l.format.to_string(), "weights": l.weights,
                "payload_bits": l.payload_bits, "payload_bytes": l.payload_bits as f64 / 8.0,
                "bits_per_weight": l.payload_bits_per_weight(), "step_bits": l.step_bits,
                "bias_bits": l.bias_bits, "normalizer_bits": l.normalizer_bits,
            }),
            || {
                format!(
                    "{:<10} {:<22} {:>10} {:>14} {:>8.4}",
                    l.name,
                    l.format.to_string(),
                    l.weights,
                    l.payload_bits as f64 / 8.0,
                    l.payload_bits_per_weight()
                )
            },
        );
    }
    for (p, bits) in &report.tables {
        out.emit(json!({"table": p.to_string(), "table_bits": bits}), || {
            format!("table {p}: {} B", *bits as f64 / 8.0)
        });
    }
    out.emit(
        json!({
            "compressed_bits": report.compressed_bits, "float_bits": report.float_bits,
            "compressed_mb": report.compressed_mb(), "float_mb": report.float_mb(),
            "compressed_mib": report.compressed_mib(), "float_mib": report.float_mib(),
            "ratio": report.ratio(),
        }),
        || {
            format!(
                "total {:.3} MB ({:.3} MiB) vs float {:.3} MB ({:.3} MiB), ratio x{:.2}",
                report.compressed_mb(),
                report.compressed_mib(),
                report.float_mb(),
                report.float_mib(),
                report.ratio()
            )
        },
    );
}

pub fn compress(a: &CompressArgs, out: Printer) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let input = load_input(&a.input)?;
    let model = compress_model(&input, &policy)?;
    write_model(&model, &a.output)?;
    print_report(
        &StorageReport::for_model(&model, ReportOptions::default())?,
        out,
    );
    Ok(())
}

pub fn decompress_model(model: &ModelFile) -> Result<ModelFile> {
    let weights = model.decode_weights(&mut TableCache::new())?;
    let layers = model
        .layers
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(i, (src, w))| {
            let mut enc: EncodedLayer = encode_layer(w, None, LayerFormat::Float32, i)?;
            enc.bias = src.bias.clone();
            enc.normalizer = src.normalizer.clone();
            Ok(enc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelFile::new(layers, model.metadata.clone()))
}

pub fn decompress(a: &DecompressArgs, out: Printer) -> Result<()> {
    let model = read_model(&a.input)?;
    let float = decompress_model(&model)?;
    if a.raw {
        let weights = float.decode_weights(&mut TableCache::new())?;
        let raw: Vec<RawLayer> = weights
            .into_iter()
            .zip(&float.layers)
            .map(|(w, l)| RawLayer {
                weights: w,
                bias: l.bias.clone(),
            })
            .collect();
        fs::write(&a.output, write_raw(&raw))
            .with_context(|| format!("writing {}", a.output.display()))?;
    } else {
        write_model(&float, &a.output)?;
    }
    out.emit(
        json!({"layers": float.layers.len(), "output": a.output.display().to_string()}),
        || {
            format!(
                "decoded {} layers to {}",
                float.layers.len(),
                a.output.display()
            )
        },
    );
    Ok(())
}
