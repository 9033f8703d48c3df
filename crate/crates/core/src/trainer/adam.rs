use ndarray::{Array1, Dimension, Zip};

use crate::trainer::network::{Gradients, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<D: Dimension> {
    m: ndarray::Array<f64, D>,
    v: ndarray::Array<f64, D>,
}

impl<D: Dimension> Moments<D> {
    fn like(a: &ndarray::Array<f64, D>) -> Self {
        Self {
            m: ndarray::Array::zeros(a.raw_dim()),
            v: ndarray::Array::zeros(a.raw_dim()),
        }
    }

    fn step(
        &mut self,
        param: &mut ndarray::Array<f64, D>,
        grad: &ndarray::Array<f64, D>,
        cfg: &AdamConfig,
        lr: f64,
        t: u64,
    ) {
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                // zero-gradient entries that never moved keep their exact value
                if *m != 0.0 {
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
                }
            });
    }
}

#[derive(Debug, Clone)]
struct LayerState {
    w: Moments<ndarray::Ix2>,
    bias: Moments<ndarray::Ix1>,
    gamma: Option<Moments<ndarray::Ix1>>,
    beta: Option<Moments<ndarray::Ix1>>,
}

/// Adam with bias-corrected moments over every trainable parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    layers: Vec<LayerState>,
}

impl Adam {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerState {
                w: Moments::like(&l.w),
                bias: Moments::like(&l.bias),
                gamma: l.bn.as_ref().map(|bn| Moments::like(&bn.gamma)),
                beta: l.bn.as_ref().map(|bn| Moments::like(&bn.beta)),
            })
            .collect();
        Self {
            config,
            t: 0,
            layers,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr` and refreshes quantized weights.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) {
        self.t += 1;
        let t = self.t;
        for ((layer, state), g) in net
            .layers
            .iter_mut()
            .zip(&mut self.layers)
            .zip(&grads.layers)
        {
            state.w.step(&mut layer.w, &g.w, &self.config, lr, t);
            state
                .bias
                .step(&mut layer.bias, &g.bias, &self.config, lr, t);
            if let Some(bn) = &mut layer.bn {
                if let (Some(s), Some(dg)) = (&mut state.gamma, &g.gamma) {
                    s.step(&mut bn.gamma, dg, &self.config, lr, t);
                }
                if let (Some(s), Some(db)) = (&mut state.beta, &g.beta) {
                    s.step(&mut bn.beta, db, &self.config, lr, t);
                }
            }
            layer.refresh_quantized();
        }
    }
}

/// One bias-corrected Adam update of a standalone parameter vector.
pub fn adam_update(
    param: &mut Array1<f64>,
    grad: &Array1<f64>,
    m: &mut Array1<f64>,
    v: &mut Array1<f64>,
    cfg: &AdamConfig,
    lr: f64,
    t: u64,
) {
    let mut mo = Moments {
        m: std::mem::take(m),
        v: std::mem::take(v),
    };
    mo.step(param, grad, cfg, lr, t);
    *m = mo.m;
    *v = mo.v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = array![1.0, -2.0];
        let (mut m, mut v) = (Array1::zeros(2), Array1::zeros(2));
        for t in 1..=10 {
            adam_update(
                &mut p,
                &Array1::zeros(2),
                &mut m,
                &mut v,
                &AdamConfig::default(),
                1e-3,
                t,
            );
        }
        assert_eq!(p, array![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = array![0.5];
        let (mut m, mut v) = (Array1::zeros(1), Array1::zeros(1));
        adam_update(
            &mut p,
            &array![1.0],
            &mut m,
            &mut v,
            &AdamConfig::default(),
            1e-3,
            1,
        );
        assert!((0.5 - p[0] - 1e-3).abs() < 1e-8, "{}", p[0]);
    }
}
