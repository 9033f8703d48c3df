mod common;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sst_core::code_table::reference_codes;
use sst_core::kernel::CompiledModel;
use sst_core::store::{
    decode_layer, decode_levels, encode_layer, EncodedLayer, LayerFormat, ModelFile, ModelMetadata,
    NormalizerParams, TableCache,
};
use sst_core::{CodeTable, Error, Orientation};

use common::random_levels;

fn random_format(rng: &mut ChaCha8Rng) -> LayerFormat {
    match rng.random_range(0..5) {
        0 => LayerFormat::Float32,
        1 => LayerFormat::Fixed8,
        2 => LayerFormat::Ternary2Bit,
        _ => {
            let codes = reference_codes();
            let params = codes[rng.random_range(0..codes.len())];
            let orientation = if rng.random_bool(0.5) {
                Orientation::Column
            } else {
                Orientation::Row
            };
            LayerFormat::Sst {
                params,
                orientation,
            }
        }
    }
}

/// Random weights on the grid of `format`, plus the step.
fn random_weights(
    format: LayerFormat,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Option<f32>) {
    let delta: f32 = rng.random_range(0.001..4.0);
    let d = delta as f64;
    match format {
        LayerFormat::Float32 => (
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-3.0f32..3.0) as f64),
            None,
        ),
        LayerFormat::Fixed8 => (
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-127i32..=127) as f64 * d),
            Some(delta),
        ),
        LayerFormat::Ternary2Bit => (
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1i32..=1) as f64 * d),
            Some(delta),
        ),
        LayerFormat::Sst {
            params,
            orientation,
        } => (
            random_levels(rows, cols, params, orientation, rng).mapv(|l| l as f64 * d),
            Some(delta),
        ),
    }
}

fn random_layer(rng: &mut ChaCha8Rng, cols: usize, ix: usize) -> EncodedLayer {
    let format = random_format(rng);
    let n = format.code_params().map_or(1, |p| p.n());
    let (rows, cols) = match format {
        LayerFormat::Sst {
            orientation: Orientation::Row,
            ..
        } => (rng.random_range(1..=40), cols.div_ceil(n) * n),
        _ => (n * rng.random_range(1..=40usize.div_ceil(n)), cols),
    };
    let (w, delta) = random_weights(format, rows, cols, rng);
    let mut layer = encode_layer(&w, delta, format, ix).unwrap();
    if rng.random_bool(0.7) {
        layer.bias = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    }
    let v = |rng: &mut ChaCha8Rng, lo: f32| {
        (0..rows)
            .map(|_| rng.random_range(lo..1.0))
            .collect::<Vec<f32>>()
    };
    layer.normalizer = match rng.random_range(0..3) {
        0 => NormalizerParams::None,
        1 => NormalizerParams::BatchNorm {
            eps: 1e-5,
            gamma: v(rng, -1.0),
            beta: v(rng, -1.0),
            mean: v(rng, -1.0),
            var: v(rng, 0.1),
        },
        _ => NormalizerParams::WeightNorm {
            row_scale: v(rng, 0.1),
        },
    };
    layer
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelFile {
    let mut layers = Vec::new();
    let mut cols = rng.random_range(1..=40);
    for i in 0..rng.random_range(0..=4) {
        let l = random_layer(rng, cols, i);
        cols = l.rows;
        layers.push(l);
    }
    let history = reference_codes()
        .into_iter()
        .filter(|_| rng.random_bool(0.3))
        .collect();
    ModelFile::new(
        layers,
        ModelMetadata {
            seed: rng.random(),
            history,
        },
    )
}

#[test]
fn layers_roundtrip_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tables = TableCache::new();
    for i in 0..100 {
        let format = random_format(&mut rng);
        let n = format.code_params().map_or(1, |p| p.n());
        let (rows, cols) = (n * rng.random_range(1..=8), n * rng.random_range(1..=8));
        let (w, delta) = random_weights(format, rows, cols, &mut rng);
        let enc = encode_layer(&w, delta, format, i).unwrap();
        assert_eq!(
            enc.payload.bit_len(),
            format.payload_bits(rows, cols).unwrap()
        );
        let table = format.code_params().map(|p| tables.get(p).unwrap());
        let back = decode_layer(&enc, table.as_deref()).unwrap();
        assert_eq!(back, w, "layer {i} ({format})");
        if let Some(d) = delta {
            let levels = decode_levels(&enc, table.as_deref(), i).unwrap();
            assert_eq!(levels.mapv(|l| l as f64 * d as f64), w);
        }
    }
}

#[test]
fn models_roundtrip_through_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let m = random_model(&mut rng);
        let bytes = m.serialize().unwrap();
        assert_eq!(&bytes[..8], b"SSTW\r\n\x1a\n");
        let back = ModelFile::deserialize(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.serialize().unwrap(), bytes);
    }
}

/// Truncated, bit-flipped and extended files must fail cleanly or decode.
#[test]
fn corrupted_files_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rejected = 0;
    for _ in 0..1000 {
        let m = random_model(&mut rng);
        let mut bytes = m.serialize().unwrap();
        match rng.random_range(0..3) {
            0 => bytes.truncate(rng.random_range(0..bytes.len())),
            1 => {
                let pos = rng.random_range(0..bytes.len());
                bytes[pos] ^= 1 << rng.random_range(0..8);
            }
            _ => bytes.extend((0..rng.random_range(1..16)).map(|_| rng.random::<u8>())),
        }
        match ModelFile::deserialize(&bytes) {
            Err(_) => rejected += 1,
            Ok(model) => {
                if let Ok(compiled) = CompiledModel::new(&model) {
                    if let Some(dim) = compiled.input_dim() {
                        let _ = compiled.forward_one(&vec![0.5; dim]);
                    }
                }
            }
        }
    }
    assert!(rejected > 500, "only {rejected} corrupt files rejected");
}

#[test]
fn out_of_range_index_reported_with_position() {
    let p = sst_core::CodeParams::new(4, 1).unwrap();
    let format = LayerFormat::Sst {
        params: p,
        orientation: Orientation::Column,
    };
    let enc = encode_layer(&Array2::zeros((4, 3)), Some(1.0), format, 0).unwrap();
    // 9 entries in 4 bits: set index 1 to 15
    let mut bytes = enc.payload.bytes().to_vec();
    bytes[0] |= 0x0f;
    let mut bad = enc.clone();
    bad.payload =
        sst_core::store::bitpack::BitStream::from_parts(bytes, enc.payload.bit_len()).unwrap();
    assert_eq!(bad.find_corrupt_index().unwrap(), Some((1, 15)));
    let table = CodeTable::build(p).unwrap();
    assert!(matches!(
        decode_layer(&bad, Some(&table)),
        Err(Error::CorruptIndex {
            position: 1,
            index: 15,
            ..
        })
    ));
}

#[test]
fn off_grid_weights_rejected() {
    let w = Array2::from_elem((2, 2), 0.3);
    assert!(matches!(
        encode_layer(&w, Some(0.25), LayerFormat::Ternary2Bit, 0),
        Err(Error::OffGrid { .. })
    ));
    let p = sst_core::CodeParams::new(2, 1).unwrap();
    let dense = Array2::from_elem((2, 2), 1.0);
    let format = LayerFormat::Sst {
        params: p,
        orientation: Orientation::Column,
    };
    assert!(matches!(
        encode_layer(&dense, Some(1.0), format, 0),
        Err(Error::InvalidSubvector { .. })
    ));
}

#[test]
fn save_and_load_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sst");
    let m = random_model(&mut ChaCha8Rng::seed_from_u64(4));
    m.save(&path).unwrap();
    m.save(&path).unwrap();
    assert_eq!(ModelFile::load(&path).unwrap(), m);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    assert!(ModelFile::load(&dir.path().join("missing"))
        .unwrap_err()
        .is_io());
}

#[test]
fn empty_model() {
    let m = ModelFile::default();
    let bytes = m.serialize().unwrap();
    assert_eq!(bytes.len(), 8 + 2 + 2 + 8 + 2);
    assert_eq!(ModelFile::deserialize(&bytes).unwrap(), m);
}
