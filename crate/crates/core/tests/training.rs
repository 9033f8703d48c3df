use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sst_core::pruner::SparsitySchedule;
use sst_core::trainer::network::Network;
use sst_core::trainer::{
    evaluate, gaussian_blobs, train_float, train_structured, Adam, AdamConfig, Dataset,
    FormatPolicy, Mode, NormKind, TrainConfig,
};
use sst_core::{CodeParams, Error, Orientation};

fn blobs() -> (Dataset, Dataset) {
    let data = gaussian_blobs(600, 32, 3, 4.0, 11).unwrap();
    data.split_at(500)
}

fn code(n: usize, k: usize) -> CodeParams {
    CodeParams::new(n, k).unwrap()
}

fn sst_net(params: CodeParams, seed: u64) -> Network {
    let sst = FormatPolicy::Sst {
        params,
        orientation: Orientation::Column,
    };
    Network::mlp(
        &[32, 64, 64, 3],
        NormKind::BatchNorm,
        sst,
        FormatPolicy::Ternary,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 50,
        ..TrainConfig::default()
    }
}

#[test]
fn structured_training_fits_blobs() {
    let (train, val) = blobs();
    let mut net = sst_net(code(8, 2), 0);
    train_float(&mut net, &train, &val, &config(0), 5).unwrap();
    let history = train_structured(
        &mut net,
        &train,
        &val,
        &SparsitySchedule::single(code(8, 2), 10),
        &config(0),
    )
    .unwrap();
    assert_eq!(history.len(), 10);
    assert!(history.iter().all(|r| r.mask_ok && r.code_ok));
    let mcr = evaluate(&net, &train, Mode::Quantized).unwrap();
    assert!(mcr <= 5.0, "training MCR {mcr}%");
    for l in &net.layers[..2] {
        assert_eq!(l.mask_violation(), 0.0);
        assert!(l.code_valid().unwrap());
    }
}

#[test]
fn training_is_deterministic() {
    let (train, val) = blobs();
    let run = || {
        let mut net = sst_net(code(8, 2), 3);
        train_float(&mut net, &train, &val, &config(3), 2).unwrap();
        let h = train_structured(
            &mut net,
            &train,
            &val,
            &SparsitySchedule::gradual(8, 4, 2, 1).unwrap(),
            &config(3),
        )
        .unwrap();
        (
            net.layers.iter().map(|l| l.w.clone()).collect::<Vec<_>>(),
            h,
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn masked_weights_stay_zero() {
    let (train, _) = blobs();
    let mut net = sst_net(code(8, 1), 5);
    for i in 0..2 {
        net.prune_layer(i, code(8, 1)).unwrap();
    }
    net.refresh_steps().unwrap();
    let mut adam = Adam::new(&net, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let idx: Vec<usize> = (0..20).map(|_| rng.random_range(0..train.len())).collect();
        let batch = train.subset(&idx);
        let (_, grads) = net
            .loss_and_gradients(&batch.x, &batch.y, Mode::Quantized)
            .unwrap();
        adam.step(&mut net, &grads, 1e-3);
    }
    for l in &net.layers[..2] {
        let mask = l.mask.as_ref().unwrap();
        for ((r, c), &w) in l.w.indexed_iter() {
            if !mask.get(r, c) {
                assert_eq!(w, 0.0);
            }
        }
        assert!(l.code_valid().unwrap());
    }
}

#[test]
fn full_k_is_ternary() {
    let mut sst = sst_net(code(8, 8), 7);
    let mut ternary = sst.clone();
    ternary.set_policies(&[FormatPolicy::Ternary; 3]).unwrap();
    for i in 0..2 {
        sst.prune_layer(i, code(8, 8)).unwrap();
    }
    sst.refresh_steps().unwrap();
    ternary.refresh_steps().unwrap();
    for (a, b) in sst.layers.iter().zip(&ternary.layers) {
        assert_eq!(a.mask.as_ref().map_or(0, |m| a.w.len() - m.ones_count()), 0);
        assert_eq!(a.delta, b.delta);
        assert_eq!(
            a.effective_weights(Mode::Quantized).unwrap(),
            b.effective_weights(Mode::Quantized).unwrap()
        );
    }
}

#[test]
fn schedule_must_end_at_policy_code() {
    let (train, val) = blobs();
    let mut net = sst_net(code(8, 1), 0);
    let err = train_structured(
        &mut net,
        &train,
        &val,
        &SparsitySchedule::single(code(8, 2), 1),
        &config(0),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Schedule(_)), "{err}");
}

#[test]
fn gradual_schedule_steps_down() {
    let s = SparsitySchedule::gradual(8, 4, 1, 2).unwrap();
    assert_eq!(
        s.stages(),
        &[code(8, 4), code(8, 3), code(8, 2), code(8, 1)]
    );
    assert!(SparsitySchedule::gradual(8, 1, 4, 2).is_err());
}
