use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::code_table::CodeParams;
use crate::error::{Error, Result};
use crate::pruner::SparsitySchedule;
use crate::trainer::adam::{Adam, AdamConfig};
use crate::trainer::data::Dataset;
use crate::trainer::network::{cross_entropy, FormatPolicy, Mode, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaRefresh {
    #[default]
    PerEpoch,
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub lr_factor: f64,
    /// Evaluations without improvement before the learning rate decays.
    pub patience: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub delta_refresh: DeltaRefresh,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_floor: 1.6e-5,
            lr_factor: 0.2,
            patience: 4,
            adam: AdamConfig::default(),
            batch_size: 100,
            seed: 0,
            delta_refresh: DeltaRefresh::PerEpoch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Schedule(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.learning_rate) {
            return Err(Error::Schedule(format!(
                "learning-rate floor {} outside (0, {}]",
                self.lr_floor, self.learning_rate
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Schedule(format!(
                "decay factor {} outside (0, 1)",
                self.lr_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Schedule("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate decayed by a constant factor when validation MCR stops improving.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauDecay {
    lr: f64,
    floor: f64,
    factor: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauDecay {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            floor: config.lr_floor,
            factor: config.lr_factor,
            patience: config.patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one validation MCR and returns the learning rate to use next.
    pub fn observe(&mut self, val_mcr: f64) -> f64 {
        if val_mcr < self.best {
            self.best = val_mcr;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.factor).max(self.floor);
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    /// Code enforced during the stage; `None` for float training.
    pub code: Option<CodeParams>,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mcr: f64,
    pub lr: f64,
    /// Every masked float weight is exactly zero.
    pub mask_ok: bool,
    /// Every quantized sub-vector is a codeword of the stage code.
    pub code_ok: bool,
}

/// Misclassification rate in percent.
pub fn evaluate(net: &Network, data: &Dataset, mode: Mode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut wrong = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + 1000).min(data.len());
        let probs = net.predict(&data.x.slice(ndarray::s![start..end, ..]).to_owned(), mode)?;
        for (row, &label) in probs.axis_iter(Axis(0)).zip(&data.y[start..end]) {
            if argmax(row.iter().copied()) != label {
                wrong += 1;
            }
        }
        start = end;
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn mean_loss(net: &Network, data: &Dataset, mode: Mode) -> Result<f64> {
    let probs = net.predict(&data.x, mode)?;
    cross_entropy(&probs, &data.y)
}

fn invariants(net: &Network) -> Result<(bool, bool)> {
    let mask_ok = net.layers.iter().all(|l| l.mask_violation() == 0.0);
    let mut code_ok = true;
    for l in &net.layers {
        code_ok &= l.code_valid()?;
    }
    Ok((mask_ok, code_ok))
}

struct Run<'a> {
    net: &'a mut Network,
    train: &'a Dataset,
    val: &'a Dataset,
    config: TrainConfig,
    rng: ChaCha8Rng,
    decay: PlateauDecay,
    history: Vec<EpochRecord>,
}

impl Run<'_> {
    fn epoch(
        &mut self,
        adam: &mut Adam,
        mode: Mode,
        stage: usize,
        code: Option<CodeParams>,
        epoch: usize,
    ) -> Result<()> {
        let lr = self.decay.lr();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in self.train.batches(self.config.batch_size, &mut self.rng) {
            // batch norm needs two samples
            if batch.len() < 2 {
                continue;
            }
            let x = self.train.x.select(Axis(0), &batch);
            let y: Vec<usize> = batch.iter().map(|&i| self.train.y[i]).collect();
            let (loss, grads) = self.net.loss_and_gradients(&x, &y, mode)?;
            adam.step(self.net, &grads, lr);
            if mode == Mode::Quantized && self.config.delta_refresh == DeltaRefresh::PerBatch {
                self.net.refresh_steps()?;
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if mode == Mode::Quantized && self.config.delta_refresh == DeltaRefresh::PerEpoch {
            self.net.refresh_steps()?;
        }
        let val_mcr = evaluate(self.net, self.val, mode)?;
        let (mask_ok, code_ok) = invariants(self.net)?;
        self.decay.observe(val_mcr);
        self.history.push(EpochRecord {
            stage,
            code,
            epoch,
            train_loss: if seen == 0 {
                0.0
            } else {
                loss_sum / seen as f64
            },
            val_mcr,
            lr,
            mask_ok,
            code_ok,
        });
        Ok(())
    }
}

/// Trains float weights of every layer, ignoring quantization policies.
pub fn train_float(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    check_data(net, train, val)?;
    let mut run = Run {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        decay: PlateauDecay::new(config),
        net,
        train,
        val,
        config: *config,
        history: Vec::new(),
    };
    let mut adam = Adam::new(run.net, config.adam);
    for epoch in 0..epochs {
        run.epoch(&mut adam, Mode::Float, 0, None, epoch)?;
    }
    run.net.round_to_f32();
    Ok(run.history)
}

/// Prunes and quantizes stage by stage, retraining after each step.
///
/// Each stage prunes the float weights of every sst layer to the stage code,
/// refits Δ from the pruned float weights, and retrains with the quantized
/// forward pass and masked updates. Optimizer moments restart at every stage;
/// the learning-rate decay carries across stages.
pub fn train_structured(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    schedule: &SparsitySchedule,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    train_structured_with(net, train, val, schedule, config, |_, _, _| Ok(()))
}

/// [`train_structured`] calling `on_stage(stage, code, net)` after each stage.
pub fn train_structured_with(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    schedule: &SparsitySchedule,
    config: &TrainConfig,
    mut on_stage: impl FnMut(usize, CodeParams, &Network) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    check_data(net, train, val)?;
    check_schedule(net, schedule)?;
    let mut run = Run {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        decay: PlateauDecay::new(config),
        net,
        train,
        val,
        config: *config,
        history: Vec::new(),
    };
    for (stage, &code) in schedule.stages().iter().enumerate() {
        for i in 0..run.net.layers.len() {
            if run.net.layers[i].spec.policy.prunes() {
                run.net.prune_layer(i, code)?;
            }
        }
        run.net.refresh_steps()?;
        let (mask_ok, code_ok) = invariants(run.net)?;
        if !(mask_ok && code_ok) {
            return Err(Error::Schedule(format!(
                "stage {stage}: pruning produced an invalid code"
            )));
        }
        let mut adam = Adam::new(run.net, config.adam);
        for epoch in 0..schedule.epochs(stage) {
            run.epoch(&mut adam, Mode::Quantized, stage, Some(code), epoch)?;
        }
        on_stage(stage, code, run.net)?;
    }
    run.net.round_to_f32();
    Ok(run.history)
}

fn check_data(net: &Network, train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for d in [train, val] {
        if d.dim() != net.input_dim() {
            return Err(Error::Dataset(format!(
                "samples have {} features, network expects {}",
                d.dim(),
                net.input_dim()
            )));
        }
        if d.classes > net.output_dim() {
            return Err(Error::Dataset(format!(
                "{} classes but {} outputs",
                d.classes,
                net.output_dim()
            )));
        }
    }
    Ok(())
}

fn check_schedule(net: &Network, schedule: &SparsitySchedule) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Schedule("empty schedule".into()));
    }
    if !net.layers.iter().any(|l| l.is_quantized()) {
        return Err(Error::Schedule("no layer has a quantized policy".into()));
    }
    for (i, l) in net.layers.iter().enumerate() {
        if let FormatPolicy::Sst { params, .. } = l.spec.policy {
            if params != schedule.target() {
                return Err(Error::Schedule(format!(
                    "layer {i}: policy {params} differs from schedule target {}",
                    schedule.target()
                )));
            }
            if let Some(current) = l.code {
                if current.k() < schedule.stages()[0].k() {
                    return Err(Error::Schedule(format!(
                        "layer {i}: already pruned to {current}, schedule starts at {}",
                        schedule.stages()[0]
                    )));
                }
            }
        }
    }
    Ok(())
}
