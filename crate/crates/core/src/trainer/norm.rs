//! Batch normalization and weight normalization, forward and backward.

use ndarray::{Array1, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// BN epsilon; a binary32 value so stored models reproduce it exactly.
pub const BN_EPS: f64 = 1e-5_f32 as f64;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    /// Weight of the new batch statistic in the running averages.
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            eps: BN_EPS,
            momentum: 0.1,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub type BatchNormTrain = (Array2<f64>, BatchNormCache, Array1<f64>, Array1<f64>);

/// Training-phase BN over a `batch x features` matrix.
///
/// Returns the affine output, the cache for backward, and the batch mean and
/// (biased) variance.
pub fn batch_norm_forward_train(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> Result<BatchNormTrain> {
    let batch = x.nrows();
    if batch < 2 {
        return Err(Error::BatchTooSmall(batch));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = x - &mean;
    let var = centered
        .mapv(|c| c * c)
        .mean_axis(Axis(0))
        .expect("non-empty batch");
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let x_hat = centered * &inv_std;
    let out = &x_hat * gamma + beta;
    Ok((out, BatchNormCache { x_hat, inv_std }, mean, var))
}

pub fn batch_norm_forward_eval(x: &Array2<f64>, bn: &BatchNorm) -> Array2<f64> {
    let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
    (x - &bn.running_mean) * &inv_std * &bn.gamma + &bn.beta
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    dout: &Array2<f64>,
    cache: &BatchNormCache,
    gamma: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let m = dout.nrows() as f64;
    let dbeta = dout.sum_axis(Axis(0));
    let dgamma = (dout * &cache.x_hat).sum_axis(Axis(0));
    let dx_hat = dout * gamma;
    let sum_dx_hat = dx_hat.sum_axis(Axis(0));
    let sum_dx_hat_xhat = (&dx_hat * &cache.x_hat).sum_axis(Axis(0));
    let mut dx = dx_hat * m;
    Zip::from(dx.rows_mut())
        .and(cache.x_hat.rows())
        .for_each(|mut dx_row, xh_row| {
            Zip::from(&mut dx_row)
                .and(&xh_row)
                .and(&sum_dx_hat)
                .and(&sum_dx_hat_xhat)
                .and(&cache.inv_std)
                .for_each(|d, &xh, &s1, &s2, &is| *d = (*d - s1 - xh * s2) * is / m);
        });
    (dx, dgamma, dbeta)
}

/// Rescales every row of `w` to unit L2 norm. Returns `(v, norms)`.
pub fn weight_norm_forward(w: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = w.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if let Some(row) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNormRow { row });
    }
    let v = w / &norms.view().insert_axis(Axis(1));
    Ok((v, norms))
}

/// Gradient with respect to `w` given the gradient with respect to `v`.
pub fn weight_norm_backward(dv: &Array2<f64>, v: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let proj = (dv * v).sum_axis(Axis(1));
    let mut dw = dv - &(v * &proj.view().insert_axis(Axis(1)));
    dw /= &norms.view().insert_axis(Axis(1));
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn train_statistics() {
        let x = random(16, 8, 1);
        let g = Array1::ones(8);
        let b = Array1::zeros(8);
        let (out, _, _, _) = batch_norm_forward_train(&x, &g, &b, BN_EPS).unwrap();
        for col in out.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|c| (c - mean) * (c - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let x = array![[3.0, 1.0], [3.0, 2.0], [3.0, 0.0]];
        let (out, _, _, _) =
            batch_norm_forward_train(&x, &Array1::ones(2), &Array1::zeros(2), BN_EPS).unwrap();
        assert!(out.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_of_one_rejected() {
        let x = array![[1.0, 2.0]];
        assert!(matches!(
            batch_norm_forward_train(&x, &Array1::ones(2), &Array1::zeros(2), BN_EPS),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn eval_matches_train_with_batch_stats() {
        let x = random(10, 4, 2);
        let mut bn = BatchNorm::new(4);
        let (train_out, _, mean, var) =
            batch_norm_forward_train(&x, &bn.gamma, &bn.beta, bn.eps).unwrap();
        bn.running_mean = mean;
        bn.running_var = var;
        let eval_out = batch_norm_forward_eval(&x, &bn);
        for (a, b) in train_out.iter().zip(eval_out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_gradient_check() {
        let x = random(16, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gamma = Array1::from_shape_fn(8, |_| rng.random_range(0.5..1.5));
        let beta = Array1::from_shape_fn(8, |_| rng.random_range(-0.5..0.5));
        let upstream = random(16, 8, 5);
        let loss = |x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>| {
            let (out, _, _, _) = batch_norm_forward_train(x, g, b, BN_EPS).unwrap();
            (&out * &upstream).sum()
        };
        let (_, cache, _, _) = batch_norm_forward_train(&x, &gamma, &beta, BN_EPS).unwrap();
        let (dx, dg, db) = batch_norm_backward(&upstream, &cache, &gamma);
        let h = 1e-6;
        for i in 0..16 {
            for j in 0..8 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
                assert!(
                    rel_err(dx[[i, j]], num) < 1e-4,
                    "dx[{i},{j}] {} vs {num}",
                    dx[[i, j]]
                );
            }
        }
        for j in 0..8 {
            let mut gp = gamma.clone();
            gp[j] += h;
            let mut gm = gamma.clone();
            gm[j] -= h;
            let num = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!(rel_err(dg[j], num) < 1e-4);
            let mut bp = beta.clone();
            bp[j] += h;
            let mut bm = beta.clone();
            bm[j] -= h;
            let num = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!(rel_err(db[j], num) < 1e-4);
        }
    }

    #[test]
    fn weight_norm_unit_rows_and_scale_invariance() {
        let w = random(5, 7, 6);
        let (v, _) = weight_norm_forward(&w).unwrap();
        for row in v.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let (v10, _) = weight_norm_forward(&(&w * 10.0)).unwrap();
        for (a, b) in v.iter().zip(v10.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut z = w.clone();
        z.row_mut(3).fill(0.0);
        assert!(matches!(
            weight_norm_forward(&z),
            Err(Error::ZeroNormRow { row: 3 })
        ));
    }

    #[test]
    fn weight_norm_gradient_check() {
        let w = random(4, 6, 7);
        let upstream = random(4, 6, 8);
        let loss = |w: &Array2<f64>| (&weight_norm_forward(w).unwrap().0 * &upstream).sum();
        let (v, norms) = weight_norm_forward(&w).unwrap();
        let dw = weight_norm_backward(&upstream, &v, &norms);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..6 {
                let mut wp = w.clone();
                wp[[i, j]] += h;
                let mut wm = w.clone();
                wm[[i, j]] -= h;
                let num = (loss(&wp) - loss(&wm)) / (2.0 * h);
                assert!(rel_err(dw[[i, j]], num) < 1e-4, "{} vs {num}", dw[[i, j]]);
            }
        }
    }
}
