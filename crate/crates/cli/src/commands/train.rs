use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sst_core::pruner::SparsitySchedule;
use sst_core::store::ModelMetadata;
use sst_core::trainer::{
    evaluate, train_float, train_structured_with, EpochRecord, FormatPolicy, Mode, Network,
    NormKind, TrainConfig,
};
use sst_core::CodeParams;

use super::{training_splits, write_model};
use crate::output::Printer;
use crate::TrainArgs;

fn parse_norm(s: &str) -> Result<NormKind> {
    match s.to_ascii_lowercase().as_str() {
        "none" => Ok(NormKind::None),
        "bn" | "batch_norm" | "batchnorm" => Ok(NormKind::BatchNorm),
        "wn" | "weight_norm" | "weightnorm" => Ok(NormKind::WeightNorm),
        other => bail!("unknown normalizer '{other}' (expected none, bn or wn)"),
    }
}

/// Parses `n:k1,k2,...`.
fn parse_schedule(s: &str, epochs: usize) -> Result<SparsitySchedule> {
    let (n, ks) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("schedule '{s}' must look like n:k1,k2,..."))?;
    let n: usize = n
        .trim()
        .parse()
        .with_context(|| format!("invalid n in schedule '{s}'"))?;
    let stages = ks
        .split(',')
        .map(|k| {
            let k: usize = k
                .trim()
                .parse()
                .with_context(|| format!("invalid k in schedule '{s}'"))?;
            Ok(CodeParams::new(n, k)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let len = stages.len();
    Ok(SparsitySchedule::new(stages, vec![epochs; len])?)
}

fn with_seed(path: &Path, run: u64, seed: u64) -> PathBuf {
    if run == 0 {
        return path.to_path_buf();
    }
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".seed{seed}"));
    PathBuf::from(s)
}

fn metric_record(seed: u64, phase: &str, r: &EpochRecord) -> serde_json::Value {
    json!({
        "seed": seed, "phase": phase, "stage": r.stage, "code": r.code.map(|c| c.to_string()),
        "epoch": r.epoch, "train_loss": r.train_loss, "val_mcr": r.val_mcr, "lr": r.lr,
        "mask_ok": r.mask_ok, "code_ok": r.code_ok,
    })
}

pub fn train(a: &TrainArgs, out: Printer) -> Result<()> {
    let norm = parse_norm(&a.norm)?;
    let schedule = match (&a.schedule, a.code) {
        (Some(s), _) => Some(parse_schedule(s, a.epochs)?),
        (None, Some(c)) => Some(SparsitySchedule::single(c, a.epochs)),
        (None, None) => None,
    };
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let data = training_splits(&a.data)?;
    let mut dims = vec![data.train.dim()];
    dims.extend(&a.hidden);
    dims.push(data.train.classes);
    let (hidden_policy, output_policy) = match &schedule {
        Some(s) => (
            FormatPolicy::Sst {
                params: s.target(),
                orientation: a.orientation,
            },
            FormatPolicy::Ternary,
        ),
        None => (FormatPolicy::Float, FormatPolicy::Float),
    };
    let mut metrics = match &a.metrics {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    if let Some(dir) = &a.checkpoint_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let mut mcrs = Vec::new();
    for run in 0..a.seeds {
        let seed = a.seed + run;
        let config = TrainConfig {
            learning_rate: a.lr,
            batch_size: a.batch_size,
            seed,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::mlp(&dims, norm, hidden_policy, output_policy, &mut rng)?;
        let mut records = Vec::new();
        let float_epochs = if schedule.is_some() {
            a.float_epochs
        } else {
            a.epochs
        };
        if float_epochs > 0 {
            for r in train_float(&mut net, &data.train, &data.val, &config, float_epochs)? {
                records.push(metric_record(seed, "float", &r));
            }
        }
        let mode = match &schedule {
            Some(s) => {
                let history = train_structured_with(
                    &mut net,
                    &data.train,
                    &data.val,
                    s,
                    &config,
                    |stage, code, net| {
                        if let Some(dir) = &a.checkpoint_dir {
                            let model = net.to_model_file(ModelMetadata {
                                seed,
                                history: s.stages()[..=stage].to_vec(),
                            })?;
                            let path = dir.join(format!(
                                "seed{seed}_stage{stage}_{}-{}.sstw",
                                code.n(),
                                code.k()
                            ));
                            model.save(&path)?;
                        }
                        Ok(())
                    },
                )?;
                records.extend(history.iter().map(|r| metric_record(seed, "structured", r)));
                Mode::Quantized
            }
            None => Mode::Float,
        };
        if let Some(m) = &mut metrics {
            for r in &records {
                writeln!(m, "{r}").context("writing metrics")?;
            }
        }
        let mcr = evaluate(&net, &data.test, mode)?;
        if let Some(path) = &a.output {
            let history = schedule
                .as_ref()
                .map(|s| s.stages().to_vec())
                .unwrap_or_default();
            write_model(
                &net.to_model_file(ModelMetadata { seed, history })?,
                &with_seed(path, run, seed),
            )?;
        }
        out.emit(
            json!({"seed": seed, "test_mcr": mcr, "epochs": records.len()}),
            || {
                format!(
                    "seed {seed}: test MCR {mcr:.2}% after {} epochs",
                    records.len()
                )
            },
        );
        mcrs.push(mcr);
    }
    if let Some(m) = &mut metrics {
        m.flush().context("writing metrics")?;
    }
    let mean = mcrs.iter().sum::<f64>() / mcrs.len() as f64;
    if mcrs.len() > 1 {
        out.emit(json!({"seeds": mcrs.len(), "mean_test_mcr": mean}), || {
            format!("mean test MCR over {} seeds: {mean:.2}%", mcrs.len())
        });
    }
    Ok(())
}
