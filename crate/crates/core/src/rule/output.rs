//! Turning MLP outputs into a parameter update.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::{NormVariant, UpdateForm, UpdateRuleConfig};
use super::mlp::MlpOutput;

/// Guard added to the RMS in the `NORM` variant so a zero update stays zero.
pub const NORM_GUARD: f64 = 1e-30;

/// Largest exponent accepted before `exp` is treated as overflow.
const MAX_EXPONENT: f64 = 88.0;

fn checked_exp(x: f64) -> Result<f64> {
    if !x.is_finite() || x > MAX_EXPONENT {
        return Err(Error::ExpOverflow(x));
    }
    Ok(x.exp())
}

/// Combines direction and magnitude outputs into `delta` with the given shape.
pub fn compose_update(out: &MlpOutput, shape: &[usize], cfg: &UpdateRuleConfig) -> Result<Tensor> {
    let l1 = cfg.lambda1;
    let l2 = cfg.lambda2;
    let m = match (cfg.update_form, &out.m) {
        (UpdateForm::DOnly, _) => None,
        (_, Some(m)) => Some(m),
        (_, None) => {
            return Err(Error::Config(format!("{:?} needs a magnitude head", cfg.update_form)));
        }
    };
    if m.is_some_and(|m| m.len() != out.d.len()) {
        return Err(Error::shape("compose_update", "d and m lengths differ"));
    }
    let data: Vec<f32> = match (cfg.update_form, m) {
        (UpdateForm::DExpM, Some(m)) => {
            let mut v = Vec::with_capacity(out.d.len());
            for (&d, &mi) in out.d.iter().zip(m) {
                v.push((l1 * f64::from(d) * checked_exp(l2 * f64::from(mi))?) as f32);
            }
            v
        }
        (UpdateForm::DExpMAvg, Some(m)) => {
            let mean = if m.is_empty() {
                0.0
            } else {
                m.iter().map(|&x| f64::from(x)).sum::<f64>() / m.len() as f64
            };
            let k = l1 * checked_exp(l2 * mean)?;
            out.d.iter().map(|&d| (k * f64::from(d)) as f32).collect()
        }
        _ => out.d.iter().map(|&d| (l1 * f64::from(d)) as f32).collect(),
    };
    let t = Tensor::new(shape.to_vec(), data)?;
    t.ensure_finite("compose_update")?;
    Ok(t)
}

/// Applies the configured output normalization, then `rms_multiplier`.
///
/// `rms_sum` is the running sum of past update RMS values for this tensor;
/// the returned sum includes the current step, so the first rolling step
/// matches per-step normalization.
pub fn normalize_output(delta: &Tensor, cfg: &UpdateRuleConfig, rms_sum: f64) -> (Tensor, f64) {
    let rms = delta.rms();
    let new_sum = rms_sum + rms;
    let tau = cfg.clip_tau;
    let factor = match cfg.norm_variant {
        NormVariant::Raw => 1.0,
        NormVariant::Norm => 1.0 / (rms + NORM_GUARD),
        NormVariant::RollingNorm => {
            if new_sum > 0.0 {
                1.0 / new_sum
            } else {
                1.0
            }
        }
        NormVariant::RollingNormClip => {
            if rms > 0.0 {
                (tau * new_sum / rms).min(1.0)
            } else {
                1.0
            }
        }
        NormVariant::NormClip => {
            if rms > 0.0 {
                (tau / rms).min(1.0)
            } else {
                1.0
            }
        }
    };
    let k = factor * cfg.rms_multiplier;
    let out = delta.map(|v| (f64::from(v) * k) as f32);
    (out, new_sum)
}
