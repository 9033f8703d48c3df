//! Text inputs: per-layer policy files, layer layouts and raw matrices.
//!
//! Policy and layout files hold one layer per line as whitespace-separated
//! `key=value` pairs; `#` starts a comment.
//!
//! ```text
//! layer=*      format=sst n=8 k=1 orientation=column
//! layer=layer2 format=ternary
//! ```
//!
//! A raw matrix file is a sequence of layers, each a `rows cols` header
//! followed by `rows * cols` row-major floats and, optionally, the word
//! `bias` and `rows` floats.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array2;
use sst_core::store::{LayerFormat, LayerLayout};
use sst_core::{CodeParams, Orientation};

/// Storage format requested for a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatChoice {
    Float,
    Fixed8,
    Ternary,
    Sst {
        params: CodeParams,
        orientation: Orientation,
    },
}

impl FormatChoice {
    /// `(n, n)` puts no sparsity constraint on the layer, so it is stored as
    /// plain 2-bit ternary.
    pub fn layer_format(self) -> LayerFormat {
        match self {
            FormatChoice::Float => LayerFormat::Float32,
            FormatChoice::Fixed8 => LayerFormat::Fixed8,
            FormatChoice::Ternary => LayerFormat::Ternary2Bit,
            FormatChoice::Sst { params, .. } if params.k() == params.n() => {
                LayerFormat::Ternary2Bit
            }
            FormatChoice::Sst {
                params,
                orientation,
            } => LayerFormat::Sst {
                params,
                orientation,
            },
        }
    }
}

impl fmt::Display for FormatChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatChoice::Float => f.write_str("float"),
            FormatChoice::Fixed8 => f.write_str("fixed8"),
            FormatChoice::Ternary => f.write_str("ternary"),
            FormatChoice::Sst {
                params,
                orientation,
            } => write!(f, "sst{params} {orientation}"),
        }
    }
}

/// Parses `n,k` (also accepts `(n,k)` and `n:k`).
pub fn parse_code(s: &str) -> Result<CodeParams, String> {
    let t = s.trim().trim_start_matches('(').trim_end_matches(')');
    let (n, k) = t
        .split_once([',', ':'])
        .ok_or_else(|| format!("expected n,k, got '{s}'"))?;
    let n: usize = n
        .trim()
        .parse()
        .map_err(|_| format!("invalid n in '{s}'"))?;
    let k: usize = k
        .trim()
        .parse()
        .map_err(|_| format!("invalid k in '{s}'"))?;
    CodeParams::new(n, k).map_err(|e| e.to_string())
}

fn parse_pairs(line: &str, lineno: usize) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| anyhow!("line {lineno}: expected key=value, got '{tok}'"))?;
        if map.insert(k.to_ascii_lowercase(), v.to_string()).is_some() {
            bail!("line {lineno}: duplicate key '{k}'");
        }
    }
    Ok(map)
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn take<T: FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    lineno: usize,
) -> Result<Option<T>> {
    map.remove(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| anyhow!("line {lineno}: invalid {key} '{v}'"))
        })
        .transpose()
}

fn format_from(map: &mut BTreeMap<String, String>, lineno: usize) -> Result<FormatChoice> {
    let format: String =
        take(map, "format", lineno)?.ok_or_else(|| anyhow!("line {lineno}: missing format"))?;
    let choice = match format.to_ascii_lowercase().as_str() {
        "float" | "float32" => FormatChoice::Float,
        "fixed8" => FormatChoice::Fixed8,
        "ternary" | "ternary2bit" => FormatChoice::Ternary,
        "sst" => {
            let n: usize =
                take(map, "n", lineno)?.ok_or_else(|| anyhow!("line {lineno}: sst needs n"))?;
            let k: usize =
                take(map, "k", lineno)?.ok_or_else(|| anyhow!("line {lineno}: sst needs k"))?;
            let params = CodeParams::new(n, k).with_context(|| format!("line {lineno}"))?;
            let orientation = match map.remove("orientation") {
                Some(o) => o
                    .parse::<Orientation>()
                    .map_err(|e| anyhow!("line {lineno}: {e}"))?,
                None => Orientation::Column,
            };
            FormatChoice::Sst {
                params,
                orientation,
            }
        }
        other => bail!("line {lineno}: unknown format '{other}'"),
    };
    Ok(choice)
}

fn reject_extra(map: &BTreeMap<String, String>, lineno: usize) -> Result<()> {
    if let Some(k) = map.keys().next() {
        bail!("line {lineno}: unknown key '{k}'");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRule {
    /// Layer name, or `*` for every layer.
    pub layer: String,
    pub format: FormatChoice,
}

/// Ordered rules; the last rule matching a layer wins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Policy {
    pub rules: Vec<PolicyRule>,
}

impl Policy {
    pub fn uniform(format: FormatChoice) -> Self {
        Self {
            rules: vec![PolicyRule {
                layer: "*".into(),
                format,
            }],
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (lineno, line) in lines(text) {
            let mut map = parse_pairs(line, lineno)?;
            let layer: String = take(&mut map, "layer", lineno)?
                .ok_or_else(|| anyhow!("line {lineno}: missing layer"))?;
            let format = format_from(&mut map, lineno)?;
            reject_extra(&map, lineno)?;
            rules.push(PolicyRule { layer, format });
        }
        Ok(Self { rules })
    }

    pub fn resolve(&self, name: &str) -> Result<FormatChoice> {
        self.rules
            .iter()
            .rev()
            .find(|r| r.layer == "*" || r.layer == name)
            .map(|r| r.format)
            .ok_or_else(|| anyhow!("no policy for layer {name}"))
    }
}

/// Parses a layout file: `layer=NAME rows=R cols=C [bias=B] [normalizer=V] [format=...]`.
/// Layers without a format default to float.
pub fn parse_layout(text: &str) -> Result<Vec<LayerLayout>> {
    let mut out = Vec::new();
    for (lineno, line) in lines(text) {
        let mut map = parse_pairs(line, lineno)?;
        let name: String = take(&mut map, "layer", lineno)?
            .ok_or_else(|| anyhow!("line {lineno}: missing layer"))?;
        let rows: usize = take(&mut map, "rows", lineno)?
            .ok_or_else(|| anyhow!("line {lineno}: missing rows"))?;
        let cols: usize = take(&mut map, "cols", lineno)?
            .ok_or_else(|| anyhow!("line {lineno}: missing cols"))?;
        let bias_len = take(&mut map, "bias", lineno)?.unwrap_or(0);
        let normalizer_values = take(&mut map, "normalizer", lineno)?.unwrap_or(0);
        let format = if map.contains_key("format") {
            format_from(&mut map, lineno)?.layer_format()
        } else {
            LayerFormat::Float32
        };
        reject_extra(&map, lineno)?;
        format
            .check_shape(rows, cols)
            .with_context(|| format!("layer {name}"))?;
        out.push(LayerLayout {
            name,
            format,
            rows,
            cols,
            bias_len,
            normalizer_values,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawLayer {
    pub weights: Array2<f64>,
    pub bias: Vec<f32>,
}

pub fn parse_raw(text: &str) -> Result<Vec<RawLayer>> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .peekable();
    let mut layers = Vec::new();
    while let Some(tok) = tokens.next() {
        let ix = layers.len();
        let rows: usize = tok
            .parse()
            .with_context(|| format!("raw layer {ix}: invalid row count '{tok}'"))?;
        let cols_tok = tokens
            .next()
            .ok_or_else(|| anyhow!("raw layer {ix}: missing column count"))?;
        let cols: usize = cols_tok
            .parse()
            .with_context(|| format!("raw layer {ix}: invalid column count '{cols_tok}'"))?;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let t = tokens.next().ok_or_else(|| {
                anyhow!(
                    "raw layer {ix}: expected {} weights, found {}",
                    rows * cols,
                    values.len()
                )
            })?;
            values.push(
                t.parse::<f32>()
                    .with_context(|| format!("raw layer {ix}: invalid weight '{t}'"))?
                    as f64,
            );
        }
        let mut bias = Vec::new();
        if tokens.peek() == Some(&"bias") {
            tokens.next();
            for _ in 0..rows {
                let t = tokens
                    .next()
                    .ok_or_else(|| anyhow!("raw layer {ix}: expected {rows} bias values"))?;
                bias.push(
                    t.parse::<f32>()
                        .with_context(|| format!("raw layer {ix}: invalid bias '{t}'"))?,
                );
            }
        }
        layers.push(RawLayer {
            weights: Array2::from_shape_vec((rows, cols), values)?,
            bias,
        });
    }
    Ok(layers)
}

pub fn write_raw(layers: &[RawLayer]) -> String {
    let mut out = String::new();
    for l in layers {
        out.push_str(&format!("{} {}\n", l.weights.nrows(), l.weights.ncols()));
        for row in l.weights.rows() {
            let line: Vec<String> = row.iter().map(|v| (*v as f32).to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        if !l.bias.is_empty() {
            let line: Vec<String> = l.bias.iter().map(f32::to_string).collect();
            out.push_str("bias ");
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}
