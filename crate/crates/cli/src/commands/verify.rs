use anyhow::{bail, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sst_core::grouping::Grouping;
use sst_core::kernel::{dense_matvec, CompressedFcLayer};
use sst_core::store::{
    decode_levels, encode_layer, EncodedLayer, LayerFormat, ModelFile, TableCache,
};

use super::{layer_name, read_model};
use crate::output::Printer;
use crate::VerifyArgs;

type Check = std::result::Result<(), String>;

fn sst_layers(model: &ModelFile) -> impl Iterator<Item = (usize, &EncodedLayer)> {
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.format, LayerFormat::Sst { .. }))
}

fn structure(model: &ModelFile) -> Check {
    for (i, l) in model.layers.iter().enumerate() {
        l.validate()
            .map_err(|e| format!("{}: {e}", layer_name(i)))?;
    }
    Ok(())
}

fn index_range(model: &ModelFile) -> Check {
    for (i, l) in sst_layers(model) {
        if let Some((pos, ix)) = l
            .find_corrupt_index()
            .map_err(|e| format!("{}: {e}", layer_name(i)))?
        {
            return Err(format!(
                "{}: index {ix} at position {pos} is out of range",
                layer_name(i)
            ));
        }
    }
    Ok(())
}

fn levels(
    l: &EncodedLayer,
    i: usize,
    tables: &mut TableCache,
) -> std::result::Result<Array2<i8>, String> {
    let table = l
        .format
        .code_params()
        .map(|p| tables.get(p))
        .transpose()
        .map_err(|e| e.to_string())?;
    decode_levels(l, table.as_deref(), i).map_err(|e| format!("{}: {e}", layer_name(i)))
}

fn roundtrip(model: &ModelFile, tables: &mut TableCache) -> Check {
    for (i, l) in model.layers.iter().enumerate() {
        if l.format == LayerFormat::Float32 {
            continue;
        }
        let delta = l
            .delta
            .ok_or_else(|| format!("{}: missing step", layer_name(i)))?;
        let w = levels(l, i, tables)?.mapv(|v| v as f64 * delta as f64);
        let again = encode_layer(&w, Some(delta), l.format, i)
            .map_err(|e| format!("{}: {e}", layer_name(i)))?;
        if again.payload != l.payload {
            return Err(format!("{}: re-encoded payload differs", layer_name(i)));
        }
    }
    Ok(())
}

fn code_validity(model: &ModelFile, tables: &mut TableCache) -> Check {
    for (i, l) in sst_layers(model) {
        let LayerFormat::Sst {
            params,
            orientation,
        } = l.format
        else {
            unreachable!()
        };
        let lv = levels(l, i, tables)?;
        let g =
            Grouping::new(l.rows, l.cols, params.n(), orientation).map_err(|e| e.to_string())?;
        for s in 0..g.count() {
            let nz = (0..params.n()).filter(|&j| lv[g.coord(s, j)] != 0).count();
            if nz > params.k() {
                return Err(format!(
                    "{}: sub-vector {s} has {nz} non-zeros, {params} allows {}",
                    layer_name(i),
                    params.k()
                ));
            }
        }
    }
    Ok(())
}

fn kernel(model: &ModelFile, tables: &mut TableCache, trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, l) in sst_layers(model) {
        let name = layer_name(i);
        let table = tables
            .get(l.format.code_params().expect("sst layer"))
            .map_err(|e| e.to_string())?;
        let layer = CompressedFcLayer::new(l, table).map_err(|e| format!("{name}: {e}"))?;
        let lv = levels(l, i, tables)?;
        let w = lv.mapv(|v| v as f64 * layer.delta());
        for t in 0..trials {
            let xi: Vec<i64> = (0..l.cols).map(|_| rng.random_range(-128..=127)).collect();
            let acc = layer.accumulate_int(&xi).map_err(|e| e.to_string())?;
            for (r, row) in lv.rows().into_iter().enumerate() {
                let exact: i64 = row.iter().zip(&xi).map(|(&a, &b)| a as i64 * b).sum();
                if acc[r] != exact {
                    return Err(format!(
                        "{name}: trial {t}, output {r}: integer kernel {} != dense {exact}",
                        acc[r]
                    ));
                }
            }
            let x: Vec<f64> = (0..l.cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = layer.matvec(&x).map_err(|e| e.to_string())?;
            let dense = dense_matvec(&w, &x).map_err(|e| e.to_string())?;
            for (r, (g, d)) in got.iter().zip(&dense).enumerate() {
                let b = l.bias.get(r).copied().unwrap_or(0.0) as f64;
                let scale: f64 = w
                    .row(r)
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a * b).abs())
                    .sum::<f64>()
                    + b.abs();
                if (g - (d + b)).abs() > 1e-6 * scale.max(f64::MIN_POSITIVE) {
                    return Err(format!(
                        "{name}: trial {t}, output {r}: kernel {g} vs dense {}",
                        d + b
                    ));
                }
            }
            let trace = layer.trace(&x).map_err(|e| e.to_string())?;
            if !trace.within_budget() {
                return Err(format!(
                    "{name}: {} ops on one sub-vector, budget {}",
                    trace.max_ops_per_subvector, trace.budget
                ));
            }
        }
    }
    Ok(())
}

pub fn verify(a: &VerifyArgs, out: Printer) -> Result<()> {
    let model = read_model(&a.model)?;
    let mut tables = TableCache::new();
    let structure_ok = structure(&model);
    let range_ok = index_range(&model);
    // later suites decode every index, so they need the earlier ones to hold
    let gate = structure_ok.clone().and(range_ok.clone());
    let skipped = |c: &Check| {
        c.clone()
            .and(Err("skipped after an earlier failure".to_string()))
    };
    let suites: Vec<(&str, Check)> = vec![
        ("structure", structure_ok),
        ("index-range", range_ok),
        (
            "codec-roundtrip",
            if gate.is_ok() {
                roundtrip(&model, &mut tables)
            } else {
                skipped(&gate)
            },
        ),
        (
            "code-validity",
            if gate.is_ok() {
                code_validity(&model, &mut tables)
            } else {
                skipped(&gate)
            },
        ),
        (
            "kernel-equivalence",
            if gate.is_ok() {
                kernel(&model, &mut tables, a.trials, a.seed)
            } else {
                skipped(&gate)
            },
        ),
    ];
    let mut first_failure = None;
    for (name, result) in &suites {
        out.emit(
            json!({"suite": name, "pass": result.is_ok(), "detail": result.as_ref().err()}),
            || match result {
                Ok(()) => format!("PASS {name}"),
                Err(e) => format!("FAIL {name}: {e}"),
            },
        );
        if let (Err(e), None) = (result, &first_failure) {
            first_failure = Some(format!("{name}: {e}"));
        }
    }
    if let Some(f) = first_failure {
        bail!("verification failed: {f}");
    }
    Ok(())
}
