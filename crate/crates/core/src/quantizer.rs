//! Symmetric uniform quantization with a fitted step size.
//!
//! `Q(w, Δ) = sgn(w) · Δ · min(floor(|w|/Δ + 0.5), (P-1)/2)` for an odd number
//! of levels `P`. Ternary is `P = 3`; 8-bit fixed point is `P = 255`.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::pruner::MaskMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerConfig {
    pub levels: u32,
    pub max_iterations: usize,
    /// Stop once the relative change of Δ falls below this.
    pub tolerance: f64,
}

impl QuantizerConfig {
    pub fn new(levels: u32) -> Result<Self> {
        let cfg = Self {
            levels,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ternary() -> Self {
        Self::default()
    }

    pub fn fixed8() -> Self {
        Self {
            levels: 255,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 3 || self.levels.is_multiple_of(2) {
            return Err(Error::InvalidLevels(self.levels));
        }
        Ok(())
    }

    pub fn max_level(&self) -> i64 {
        (self.levels as i64 - 1) / 2
    }
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct StepSize(f64);

impl StepSize {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidStep(delta));
        }
        Ok(Self(delta))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Rounds to the nearest binary32 value, the precision Δ is stored with.
    pub fn to_f32_precision(self) -> Self {
        let snapped = self.0 as f32 as f64;
        if snapped > 0.0 {
            Self(snapped)
        } else {
            Self(f32::MIN_POSITIVE as f64)
        }
    }
}

/// Integer level of `w`, in `[-(P-1)/2, (P-1)/2]`.
#[inline]
pub fn quantize_level(w: f64, delta: f64, max_level: i64) -> i64 {
    let magnitude = ((w.abs() / delta + 0.5).floor() as i64).min(max_level);
    if w < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

pub fn quantize_weight(w: f64, delta: StepSize, levels: u32) -> Result<f64> {
    if levels < 3 || levels.is_multiple_of(2) {
        return Err(Error::InvalidLevels(levels));
    }
    let max_level = (levels as i64 - 1) / 2;
    Ok(quantize_level(w, delta.get(), max_level) as f64 * delta.get())
}

/// Squared quantization error of `weights` under step `delta`.
pub fn squared_error(weights: &[f64], delta: f64, max_level: i64) -> f64 {
    weights
        .iter()
        .map(|&w| {
            let e = quantize_level(w, delta, max_level) as f64 * delta - w;
            e * e
        })
        .sum()
}

/// Fits Δ by alternating level assignment and least-squares rescaling.
///
/// For ternary codes the alternation starts from the exact optimum over
/// magnitude-sorted prefixes, so it terminates at the global minimizer. For
/// wider codes it starts from `max|w| / ((P-1)/2)` and from a small set of
/// scaled restarts, keeping the lowest error.
pub fn find_step_size(weights: &[f64], config: &QuantizerConfig) -> Result<StepSize> {
    config.validate()?;
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if !max_abs.is_finite() {
        return Err(Error::InvalidStep(max_abs));
    }
    if max_abs == 0.0 {
        return Err(Error::AllZero);
    }
    let max_level = config.max_level();

    let starts: Vec<f64> = if max_level == 1 {
        vec![ternary_prefix_optimum(weights)]
    } else {
        let base = max_abs / max_level as f64;
        [1.0, 0.75, 0.5, 0.35, 0.25]
            .iter()
            .map(|s| base * s)
            .collect()
    };

    let mut best: Option<(f64, f64)> = None;
    for start in starts {
        let delta = lloyd(weights, start, max_level, config);
        let err = squared_error(weights, delta, max_level);
        if best.is_none_or(|(_, e)| err < e) {
            best = Some((delta, err));
        }
    }
    StepSize::new(best.expect("at least one start").0)
}

/// Global ternary optimum: the level-1 set is always a top-m set of |w|.
fn ternary_prefix_optimum(weights: &[f64]) -> f64 {
    let mut mags: Vec<f64> = weights
        .iter()
        .map(|w| w.abs())
        .filter(|&a| a > 0.0)
        .collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut best = (f64::NEG_INFINITY, mags[0]);
    let mut prefix = 0.0;
    for (i, &a) in mags.iter().enumerate() {
        prefix += a;
        let m = (i + 1) as f64;
        // squared error is sum(w^2) - prefix^2 / m
        let gain = prefix * prefix / m;
        if gain > best.0 {
            best = (gain, prefix / m);
        }
    }
    best.1
}

fn lloyd(weights: &[f64], start: f64, max_level: i64, config: &QuantizerConfig) -> f64 {
    let mut delta = start;
    for _ in 0..config.max_iterations {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for &w in weights {
            let l = quantize_level(w, delta, max_level) as f64;
            num += l * w;
            den += l * l;
        }
        if den == 0.0 {
            delta *= 0.5;
            continue;
        }
        let next = num / den;
        let change = ((next - delta) / delta).abs();
        delta = next;
        if change < config.tolerance {
            break;
        }
    }
    delta
}

/// Masks `w`, fits Δ over the surviving weights and quantizes.
///
/// Δ is rounded to binary32 precision before the final quantization so the
/// returned weights are exactly reproducible from a stored model.
pub fn quantize_layer(
    w: &Array2<f64>,
    mask: Option<&MaskMatrix>,
    config: &QuantizerConfig,
) -> Result<(Array2<f64>, StepSize)> {
    let masked = match mask {
        Some(m) => crate::pruner::apply_mask(w, m)?,
        None => w.clone(),
    };
    let values: Vec<f64> = masked.iter().copied().collect();
    let delta = find_step_size(&values, config)?.to_f32_precision();
    Ok((quantize_with(&masked, delta, config), delta))
}

/// Quantizes every entry with a fixed Δ.
pub fn quantize_with(w: &Array2<f64>, delta: StepSize, config: &QuantizerConfig) -> Array2<f64> {
    let max_level = config.max_level();
    let d = delta.get();
    w.mapv(|x| quantize_level(x, d, max_level) as f64 * d)
}

/// Quantizes into an existing buffer.
pub fn quantize_into(
    w: &Array2<f64>,
    delta: StepSize,
    config: &QuantizerConfig,
    out: &mut Array2<f64>,
) {
    let max_level = config.max_level();
    let d = delta.get();
    Zip::from(out)
        .and(w)
        .for_each(|o, &x| *o = quantize_level(x, d, max_level) as f64 * d);
}
