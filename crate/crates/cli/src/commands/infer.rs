use anyhow::{bail, Result};
use serde_json::json;
use sst_core::kernel::{CompiledModel, CompressedFcLayer};
use sst_core::store::TableCache;
use sst_core::trainer::train::argmax;

use super::{eval_set, layer_name, read_model};
use crate::output::Printer;
use crate::InferArgs;

pub fn infer(a: &InferArgs, out: Printer) -> Result<()> {
    let model = read_model(&a.model)?;
    let data = eval_set(&a.data)?;
    let compiled = CompiledModel::new(&model)?;
    if compiled.input_dim() != Some(data.dim()) {
        bail!(
            "model expects {:?} inputs, dataset has {}",
            compiled.input_dim(),
            data.dim()
        );
    }
    let probs = compiled.forward(&data.x)?;
    let wrong = probs
        .rows()
        .into_iter()
        .zip(&data.y)
        .filter(|(p, &y)| argmax(p.iter().copied()) != y)
        .count();
    let mcr = 100.0 * wrong as f64 / data.len() as f64;
    if a.trace {
        let mut tables = TableCache::new();
        for (i, l) in model.layers.iter().enumerate() {
            let Some(p) = l.format.code_params() else {
                continue;
            };
            let layer = CompressedFcLayer::new(l, tables.get(p)?)?;
            let t = layer.trace(&vec![0.0; l.cols])?;
            out.emit(
                json!({
                    "layer": layer_name(i), "lookups": t.lookups, "add_sub": t.add_sub,
                    "skipped_zeros": t.skipped_zeros, "max_ops_per_subvector": t.max_ops_per_subvector,
                    "budget": t.budget,
                }),
                || {
                    format!(
                        "{}: {} lookups, {} add/sub, {} zeros skipped, max {} ops per sub-vector (budget {})",
                        layer_name(i),
                        t.lookups,
                        t.add_sub,
                        t.skipped_zeros,
                        t.max_ops_per_subvector,
                        t.budget
                    )
                },
            );
        }
    }
    out.emit(
        json!({"samples": data.len(), "errors": wrong, "mcr": mcr}),
        || {
            format!(
                "{} samples, {wrong} misclassified, MCR {mcr:.2}%",
                data.len()
            )
        },
    );
    Ok(())
}
