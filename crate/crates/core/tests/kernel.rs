mod common;

use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sst_core::code_table::reference_codes;
use sst_core::kernel::{compressed_forward, CompiledModel, CompressedFcLayer};
use sst_core::store::{encode_layer, LayerFormat, ModelMetadata};
use sst_core::trainer::network::Network;
use sst_core::trainer::{FormatPolicy, Mode, NormKind};
use sst_core::{CodeParams, CodeTable, Orientation};

use common::random_levels;

fn case() -> impl Strategy<Value = (usize, bool, usize, usize, u64)> {
    (
        0usize..6,
        any::<bool>(),
        1usize..=12,
        1usize..=48,
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_matches_level_sums((code, row, groups, other, seed) in case()) {
        let p = reference_codes()[code];
        let orientation = if row { Orientation::Row } else { Orientation::Column };
        let (rows, cols) = if row { (other, groups * p.n()) } else { (groups * p.n(), other) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = random_levels(rows, cols, p, orientation, &mut rng);
        let delta: f32 = rng.random_range(0.01..1.0);
        let w = levels.mapv(|l| l as f64 * delta as f64);
        let enc = encode_layer(&w, Some(delta), LayerFormat::Sst { params: p, orientation }, 0).unwrap();
        let layer = CompressedFcLayer::new(&enc, Arc::new(CodeTable::build(p).unwrap())).unwrap();

        let xi: Vec<i64> = (0..cols).map(|_| rng.random_range(-50..=50)).collect();
        let acc = layer.accumulate_int(&xi).unwrap();
        for r in 0..rows {
            prop_assert_eq!(acc[r], (0..cols).map(|c| levels[[r, c]] as i64 * xi[c]).sum::<i64>());
        }
        // integer-valued reals are summed exactly, so the two modes agree bit for bit
        let xr: Vec<f64> = xi.iter().map(|&v| v as f64).collect();
        let real = layer.accumulate_real(&xr).unwrap();
        prop_assert_eq!(real, acc.iter().map(|&v| v as f64).collect::<Vec<_>>());

        let trace = layer.trace(&xr).unwrap();
        prop_assert!(trace.within_budget());
        prop_assert_eq!(trace.lookups as usize, rows * cols / p.n());
        prop_assert!(trace.max_ops_per_subvector <= p.k() as u64);
    }
}

#[test]
fn wrong_input_length_rejected() {
    let p = CodeParams::new(4, 1).unwrap();
    let enc = encode_layer(
        &Array2::zeros((4, 3)),
        Some(1.0),
        LayerFormat::Sst {
            params: p,
            orientation: Orientation::Column,
        },
        0,
    )
    .unwrap();
    let layer = CompressedFcLayer::new(&enc, Arc::new(CodeTable::build(p).unwrap())).unwrap();
    assert!(layer.matvec(&[1.0, 2.0]).is_err());
    let other = Arc::new(CodeTable::build(CodeParams::new(4, 2).unwrap()).unwrap());
    assert!(CompressedFcLayer::new(&enc, other).is_err());
}

/// The compiled model of an exported network reproduces its quantized predictions.
#[test]
fn compiled_model_matches_network() {
    for (seed, norm) in [
        (1, NormKind::BatchNorm),
        (2, NormKind::WeightNorm),
        (3, NormKind::None),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = CodeParams::new(8, 2).unwrap();
        let sst = FormatPolicy::Sst {
            params: p,
            orientation: Orientation::Column,
        };
        let mut net =
            Network::mlp(&[16, 24, 16, 5], norm, sst, FormatPolicy::Ternary, &mut rng).unwrap();
        for l in &mut net.layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            if let Some(bn) = &mut l.bn {
                bn.running_mean
                    .mapv_inplace(|_| rng.random_range(-0.5..0.5));
                bn.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
            }
        }
        for i in 0..2 {
            net.prune_layer(i, p).unwrap();
        }
        net.refresh_steps().unwrap();
        net.round_to_f32();

        let model = net.to_model_file(ModelMetadata::default()).unwrap();
        let x = Array2::from_shape_fn((50, 16), |_| rng.random_range(-1.0..1.0));
        let expected = net.predict(&x, Mode::Quantized).unwrap();
        let got = compressed_forward(&model, &x).unwrap();
        let worst = expected
            .iter()
            .zip(got.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "{norm:?}: max deviation {worst}");
        assert_eq!(CompiledModel::new(&model).unwrap().input_dim(), Some(16));
    }
}
