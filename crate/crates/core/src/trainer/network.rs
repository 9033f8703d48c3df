use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::code_table::{CodeParams, CodeRanker, TernarySubvector, Trit};
use crate::error::{Error, Result};
use crate::grouping::{Grouping, Orientation};
use crate::pruner::{structured_prune, MaskMatrix};
use crate::quantizer::{find_step_size, quantize_into, quantize_level, QuantizerConfig, StepSize};
use crate::store::layer::{encode_layer, LayerFormat, NormalizerParams};
use crate::store::model::{ModelFile, ModelMetadata, TableCache};
use crate::trainer::norm::{
    batch_norm_backward, batch_norm_forward_eval, batch_norm_forward_train, weight_norm_backward,
    weight_norm_forward, BatchNorm, BatchNormCache,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Output layer only.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    None,
    BatchNorm,
    WeightNorm,
}

/// How a layer's weights are stored and trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatPolicy {
    Float,
    /// Quantized to 255 levels, never pruned.
    Fixed8,
    /// Quantized to {-Δ, 0, +Δ}, never pruned.
    Ternary,
    /// Pruned to the code and quantized to {-Δ, 0, +Δ}.
    Sst {
        params: CodeParams,
        orientation: Orientation,
    },
}

impl FormatPolicy {
    pub fn quantizer(&self) -> Option<QuantizerConfig> {
        match self {
            FormatPolicy::Float => None,
            FormatPolicy::Fixed8 => Some(QuantizerConfig::fixed8()),
            FormatPolicy::Ternary | FormatPolicy::Sst { .. } => Some(QuantizerConfig::ternary()),
        }
    }

    pub fn prunes(&self) -> bool {
        matches!(self, FormatPolicy::Sst { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub normalizer: NormKind,
    pub policy: FormatPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Uses the masked float weights.
    Float,
    /// Uses the quantized weights of every quantized layer.
    Quantized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Float shadow weights, `out_dim x in_dim`.
    pub w: Array2<f64>,
    pub bias: Array1<f64>,
    pub mask: Option<MaskMatrix>,
    /// Code currently enforced by `mask` (the stage code during gradual pruning).
    pub code: Option<CodeParams>,
    pub delta: Option<StepSize>,
    pub wq: Option<Array2<f64>>,
    pub bn: Option<BatchNorm>,
}

impl Layer {
    fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (spec.in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((spec.out_dim, spec.in_dim), |_| {
            rng.random_range(-bound..bound)
        });
        Self {
            spec,
            w,
            bias: Array1::zeros(spec.out_dim),
            mask: None,
            code: None,
            delta: None,
            wq: None,
            bn: (spec.normalizer == NormKind::BatchNorm).then(|| BatchNorm::new(spec.out_dim)),
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.spec.policy.quantizer().is_some()
    }

    /// Weights used by the forward pass in `mode`.
    pub fn effective_weights(&self, mode: Mode) -> Result<&Array2<f64>> {
        match (mode, self.is_quantized()) {
            (Mode::Quantized, true) => self.wq.as_ref().ok_or_else(|| {
                Error::Network("quantized forward before the layer was quantized".into())
            }),
            _ => Ok(&self.w),
        }
    }

    /// Fits Δ to the masked float weights and requantizes.
    pub fn refresh_step(&mut self) -> Result<()> {
        let Some(cfg) = self.spec.policy.quantizer() else {
            return Ok(());
        };
        let values: Vec<f64> = self.w.iter().copied().collect();
        let delta = find_step_size(&values, &cfg)?.to_f32_precision();
        self.delta = Some(delta);
        self.refresh_quantized();
        Ok(())
    }

    /// Requantizes with the current Δ.
    pub fn refresh_quantized(&mut self) {
        let (Some(cfg), Some(delta)) = (self.spec.policy.quantizer(), self.delta) else {
            return;
        };
        let wq = self.wq.get_or_insert_with(|| Array2::zeros(self.w.dim()));
        quantize_into(&self.w, delta, &cfg, wq);
    }

    /// Largest |w| at a masked position (0 when the mask holds).
    pub fn mask_violation(&self) -> f64 {
        let Some(mask) = &self.mask else { return 0.0 };
        self.w
            .iter()
            .zip(mask.as_array().iter())
            .filter(|(_, &keep)| !keep)
            .fold(0.0, |m, (w, _)| m.max(w.abs()))
    }

    /// Checks that every sub-vector of `wq / Δ` is a codeword of the current code.
    pub fn code_valid(&self) -> Result<bool> {
        let (FormatPolicy::Sst { orientation, .. }, Some(code), Some(wq), Some(delta)) =
            (self.spec.policy, self.code, &self.wq, self.delta)
        else {
            return Ok(true);
        };
        let ranker = CodeRanker::new(code)?;
        let (rows, cols) = wq.dim();
        let g = Grouping::new(rows, cols, code.n(), orientation)?;
        let d = delta.get();
        let mut trits = Vec::with_capacity(code.n());
        for s in 0..g.count() {
            trits.clear();
            for i in 0..code.n() {
                let v = wq[g.coord(s, i)];
                let l = quantize_level(v, d, 1);
                if l as f64 * d != v {
                    return Ok(false);
                }
                trits.push(Trit::from_i8(l as i8).expect("level in [-1, 1]"));
            }
            if ranker.rank(&TernarySubvector::new(trits.clone())).is_err() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    /// Weights actually multiplied (after weight normalization).
    used: Array2<f64>,
    wn_norms: Option<Array1<f64>>,
    bn: Option<BatchNormCache>,
    pre_activation: Array2<f64>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    layers: Vec<LayerCache>,
    output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub w: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for l in &self.layers {
            s += l.w.iter().map(|x| x * x).sum::<f64>();
            s += l.bias.iter().map(|x| x * x).sum::<f64>();
            for v in [&l.gamma, &l.beta].into_iter().flatten() {
                s += v.iter().map(|x| x * x).sum::<f64>();
            }
        }
        s.sqrt()
    }
}

/// A fully connected network `y_{k+1} = φ(W_{k+1} y_k + b_{k+1})`.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    cache: Option<ForwardCache>,
}

impl Network {
    pub fn new(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        validate_specs(specs)?;
        Ok(Self {
            layers: specs.iter().map(|&s| Layer::init(s, rng)).collect(),
            cache: None,
        })
    }

    /// An MLP with ReLU hidden layers and a softmax output. `hidden_policy`
    /// applies to hidden layers, `output_policy` to the last.
    pub fn mlp(
        dims: &[usize],
        normalizer: NormKind,
        hidden_policy: FormatPolicy,
        output_policy: FormatPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::new(
            &mlp_specs(dims, normalizer, hidden_policy, output_policy)?,
            rng,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").spec.out_dim
    }

    /// Replaces layer policies, e.g. to retrain a float network as quantized.
    pub fn set_policies(&mut self, policies: &[FormatPolicy]) -> Result<()> {
        if policies.len() != self.layers.len() {
            return Err(Error::Network(format!(
                "{} policies for {} layers",
                policies.len(),
                self.layers.len()
            )));
        }
        let mut specs: Vec<LayerSpec> = self.layers.iter().map(|l| l.spec).collect();
        for (s, p) in specs.iter_mut().zip(policies) {
            s.policy = *p;
        }
        validate_specs(&specs)?;
        for (l, s) in self.layers.iter_mut().zip(specs) {
            l.spec = s;
            if !s.policy.prunes() {
                l.mask = None;
                l.code = None;
            }
            if !l.is_quantized() {
                l.delta = None;
                l.wq = None;
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Prunes a layer's float weights to `code` and installs the mask.
    pub fn prune_layer(&mut self, index: usize, code: CodeParams) -> Result<()> {
        let layer = &mut self.layers[index];
        let FormatPolicy::Sst { orientation, .. } = layer.spec.policy else {
            return Err(Error::Network(format!(
                "layer {index} is not structured-sparse"
            )));
        };
        let mask = structured_prune(&layer.w, code, orientation)?;
        crate::pruner::apply_mask_in_place(&mut layer.w, &mask)?;
        layer.mask = Some(mask);
        layer.code = Some(code);
        Ok(())
    }

    pub fn refresh_steps(&mut self) -> Result<()> {
        for l in &mut self.layers {
            l.refresh_step()?;
        }
        Ok(())
    }

    pub fn refresh_quantized(&mut self) {
        for l in &mut self.layers {
            l.refresh_quantized();
        }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: (x.nrows(), self.input_dim()),
                got: x.dim(),
            });
        }
        Ok(())
    }

    /// Eval-phase forward pass; leaves the network untouched.
    pub fn predict(&self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for layer in &self.layers {
            let w_eff = layer.effective_weights(mode)?;
            let net = match layer.spec.normalizer {
                NormKind::WeightNorm => y.dot(&weight_norm_forward(w_eff)?.0.t()),
                _ => y.dot(&w_eff.t()),
            } + &layer.bias;
            let pre = match &layer.bn {
                Some(bn) => batch_norm_forward_eval(&net, bn),
                None => net,
            };
            y = match layer.spec.activation {
                Activation::Relu => pre.mapv(|v| v.max(0.0)),
                Activation::Softmax => softmax(&pre),
            };
        }
        Ok(y)
    }

    /// Forward pass. Train phase caches activations for `backward_masked`
    /// and updates BN running statistics.
    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode, phase: Phase) -> Result<Array2<f64>> {
        self.check_input(x)?;
        if phase == Phase::Eval {
            self.cache = None;
            return self.predict(x, mode);
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut y = x.clone();
        for layer in &mut self.layers {
            let w_eff = layer.effective_weights(mode)?;
            let (used, wn_norms) = match layer.spec.normalizer {
                NormKind::WeightNorm => {
                    let (v, n) = weight_norm_forward(w_eff)?;
                    (v, Some(n))
                }
                _ => (w_eff.clone(), None),
            };
            let net = y.dot(&used.t()) + &layer.bias;
            let (pre, bn_cache) = match &mut layer.bn {
                Some(bn) => {
                    let (out, cache, mean, var) =
                        batch_norm_forward_train(&net, &bn.gamma, &bn.beta, bn.eps)?;
                    let m = net.nrows() as f64;
                    // running variance tracks the unbiased estimate
                    let unbiased = var * (m / (m - 1.0));
                    bn.running_mean =
                        &bn.running_mean * (1.0 - bn.momentum) + &(mean * bn.momentum);
                    bn.running_var =
                        &bn.running_var * (1.0 - bn.momentum) + &(unbiased * bn.momentum);
                    (out, Some(cache))
                }
                None => (net, None),
            };
            let out = match layer.spec.activation {
                Activation::Relu => pre.mapv(|v| v.max(0.0)),
                Activation::Softmax => softmax(&pre),
            };
            caches.push(LayerCache {
                input: y,
                used,
                wn_norms,
                bn: bn_cache,
                pre_activation: pre,
            });
            y = out;
        }
        self.cache = Some(ForwardCache {
            layers: caches,
            output: y.clone(),
        });
        Ok(y)
    }

    /// Gradients of the mean cross-entropy against `targets` for the last
    /// train-phase forward. Quantized layers pass gradients straight through
    /// to the float weights; masked positions get exactly zero.
    pub fn backward_masked(&self, targets: &[usize]) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        let batch = cache.output.nrows();
        if targets.len() != batch {
            return Err(Error::Network(format!(
                "{} targets for a batch of {batch}",
                targets.len()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        // softmax + cross-entropy
        let mut d_out = cache.output.clone();
        for (row, &t) in targets.iter().enumerate() {
            d_out[[row, t]] -= 1.0;
        }
        d_out /= batch as f64;

        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let d_pre = match layer.spec.activation {
                Activation::Softmax => d_out,
                Activation::Relu => {
                    let mut d = d_out;
                    ndarray::Zip::from(&mut d)
                        .and(&lc.pre_activation)
                        .for_each(|g, &z| {
                            if z <= 0.0 {
                                *g = 0.0;
                            }
                        });
                    d
                }
            };
            let (d_net, gamma, beta) = match (&layer.bn, &lc.bn) {
                (Some(bn), Some(bc)) => {
                    let (dx, dg, db) = batch_norm_backward(&d_pre, bc, &bn.gamma);
                    (dx, Some(dg), Some(db))
                }
                _ => (d_pre, None, None),
            };
            let bias = d_net.sum_axis(Axis(0));
            let d_used = d_net.t().dot(&lc.input);
            d_out = d_net.dot(&lc.used);
            let mut w = match &lc.wn_norms {
                Some(norms) => weight_norm_backward(&d_used, &lc.used, norms),
                None => d_used,
            };
            if let Some(mask) = &layer.mask {
                crate::pruner::apply_mask_in_place(&mut w, mask)?;
            }
            grads.push(LayerGradients {
                w,
                bias,
                gamma,
                beta,
            });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Mean cross-entropy and gradients for one batch.
    pub fn loss_and_gradients(
        &mut self,
        x: &Array2<f64>,
        targets: &[usize],
        mode: Mode,
    ) -> Result<(f64, Gradients)> {
        let probs = self.forward(x, mode, Phase::Train)?;
        let loss = cross_entropy(&probs, targets)?;
        Ok((loss, self.backward_masked(targets)?))
    }

    /// Rounds biases, normalizer parameters, float-policy weights and Δ to
    /// binary32 so the exported model reproduces this network exactly.
    pub fn round_to_f32(&mut self) {
        let snap = |a: &mut Array1<f64>| a.mapv_inplace(|v| v as f32 as f64);
        for l in &mut self.layers {
            snap(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                snap(&mut bn.gamma);
                snap(&mut bn.beta);
                snap(&mut bn.running_mean);
                snap(&mut bn.running_var);
                bn.eps = bn.eps as f32 as f64;
            }
            if !l.is_quantized() {
                l.w.mapv_inplace(|v| v as f32 as f64);
            }
            if let Some(d) = l.delta {
                l.delta = Some(d.to_f32_precision());
            }
            l.refresh_quantized();
        }
    }

    /// Exports the stored form: quantized weights for quantized layers.
    pub fn to_model_file(&self, metadata: ModelMetadata) -> Result<ModelFile> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (format, weights, delta) = match l.spec.policy {
                FormatPolicy::Float => (LayerFormat::Float32, &l.w, None),
                FormatPolicy::Fixed8 => (
                    LayerFormat::Fixed8,
                    l.effective_weights(Mode::Quantized)?,
                    l.delta,
                ),
                FormatPolicy::Ternary => (
                    LayerFormat::Ternary2Bit,
                    l.effective_weights(Mode::Quantized)?,
                    l.delta,
                ),
                FormatPolicy::Sst {
                    params,
                    orientation,
                } => {
                    let code = l.code.unwrap_or(params);
                    (
                        LayerFormat::Sst {
                            params: code,
                            orientation,
                        },
                        l.effective_weights(Mode::Quantized)?,
                        l.delta,
                    )
                }
            };
            let delta = delta.map(|d| d.get() as f32);
            let mut enc = encode_layer(weights, delta, format, i)?;
            enc.bias = l.bias.iter().map(|&b| b as f32).collect();
            enc.normalizer = match l.spec.normalizer {
                NormKind::None => NormalizerParams::None,
                NormKind::BatchNorm => {
                    let bn = l.bn.as_ref().expect("batch-norm layer has parameters");
                    let f = |a: &Array1<f64>| a.iter().map(|&v| v as f32).collect::<Vec<f32>>();
                    NormalizerParams::BatchNorm {
                        eps: bn.eps as f32,
                        gamma: f(&bn.gamma),
                        beta: f(&bn.beta),
                        mean: f(&bn.running_mean),
                        var: f(&bn.running_var),
                    }
                }
                NormKind::WeightNorm => {
                    let (_, norms) = weight_norm_forward(weights)?;
                    NormalizerParams::WeightNorm {
                        row_scale: norms.iter().map(|&n| (1.0 / n) as f32).collect(),
                    }
                }
            };
            layers.push(enc);
        }
        Ok(ModelFile::new(layers, metadata))
    }

    /// Rebuilds a network from a stored model. Hidden layers use ReLU and
    /// the last layer softmax; sst masks are the stored non-zero pattern.
    pub fn from_model_file(model: &ModelFile) -> Result<Self> {
        if model.layers.is_empty() {
            return Err(Error::Network("model has no layers".into()));
        }
        let mut cache = TableCache::new();
        let weights = model.decode_weights(&mut cache)?;
        let last = model.layers.len() - 1;
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, (enc, w)) in model.layers.iter().zip(weights).enumerate() {
            let policy = match enc.format {
                LayerFormat::Float32 => FormatPolicy::Float,
                LayerFormat::Fixed8 => FormatPolicy::Fixed8,
                LayerFormat::Ternary2Bit => FormatPolicy::Ternary,
                LayerFormat::Sst {
                    params,
                    orientation,
                } => FormatPolicy::Sst {
                    params,
                    orientation,
                },
            };
            let (normalizer, bn) = match &enc.normalizer {
                NormalizerParams::None => (NormKind::None, None),
                NormalizerParams::BatchNorm {
                    eps,
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let a = |v: &[f32]| Array1::from_iter(v.iter().map(|&x| x as f64));
                    let mut bn = BatchNorm::new(enc.rows);
                    bn.eps = *eps as f64;
                    bn.gamma = a(gamma);
                    bn.beta = a(beta);
                    bn.running_mean = a(mean);
                    bn.running_var = a(var);
                    (NormKind::BatchNorm, Some(bn))
                }
                NormalizerParams::WeightNorm { .. } => (NormKind::WeightNorm, None),
            };
            let spec = LayerSpec {
                in_dim: enc.cols,
                out_dim: enc.rows,
                activation: if i == last {
                    Activation::Softmax
                } else {
                    Activation::Relu
                },
                normalizer,
                policy,
            };
            let bias = if enc.bias.is_empty() {
                Array1::zeros(enc.rows)
            } else {
                Array1::from_iter(enc.bias.iter().map(|&b| b as f64))
            };
            let (mask, code) = match enc.format {
                LayerFormat::Sst {
                    params,
                    orientation,
                } => (
                    Some(structured_prune(&w, params, orientation)?),
                    Some(params),
                ),
                _ => (None, None),
            };
            let delta = enc.delta.map(|d| StepSize::new(d as f64)).transpose()?;
            let wq = delta.map(|_| w.clone());
            layers.push(Layer {
                spec,
                w,
                bias,
                mask,
                code,
                delta,
                wq,
                bn,
            });
        }
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        Ok(Self {
            layers,
            cache: None,
        })
    }
}

pub fn mlp_specs(
    dims: &[usize],
    normalizer: NormKind,
    hidden_policy: FormatPolicy,
    output_policy: FormatPolicy,
) -> Result<Vec<LayerSpec>> {
    if dims.len() < 2 {
        return Err(Error::Network(
            "an MLP needs at least input and output sizes".into(),
        ));
    }
    let last = dims.len() - 2;
    Ok(dims
        .windows(2)
        .enumerate()
        .map(|(i, d)| LayerSpec {
            in_dim: d[0],
            out_dim: d[1],
            activation: if i == last {
                Activation::Softmax
            } else {
                Activation::Relu
            },
            normalizer: if i == last {
                NormKind::None
            } else {
                normalizer
            },
            policy: if i == last {
                output_policy
            } else {
                hidden_policy
            },
        })
        .collect())
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Network("network has no layers".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        let last = i + 1 == specs.len();
        if (s.activation == Activation::Softmax) != last {
            return Err(Error::Network(format!(
                "layer {i}: softmax is allowed only on the final layer"
            )));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(Error::Network(format!(
                "layer {i}: input {} does not match previous output {}",
                s.in_dim,
                specs[i - 1].out_dim
            )));
        }
        if let FormatPolicy::Sst {
            params,
            orientation,
        } = s.policy
        {
            Grouping::new(s.out_dim, s.in_dim, params.n(), orientation)
                .map_err(|e| Error::Network(format!("layer {i}: {e}")))?;
        }
    }
    Ok(())
}

pub fn softmax(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean of `-log p[target]` over the batch.
pub fn cross_entropy(probs: &Array2<f64>, targets: &[usize]) -> Result<f64> {
    if probs.nrows() != targets.len() {
        return Err(Error::Network(format!(
            "{} targets for {} rows",
            targets.len(),
            probs.nrows()
        )));
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs[[i, t]].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / targets.len() as f64)
}
