use crate::accumulators::{update_tensor, AccumulatorConfig, TensorSlot};
use crate::error::Result;
use crate::tensor::Tensor;

use super::config::UpdateRuleConfig;
use super::features::build_features;
use super::mlp::{mlp_forward, UpdateRuleParams};
use super::newton_schulz::newton_schulz;
use super::output::{compose_update, normalize_output};

/// One learned-rule update for a single tensor.
///
/// Clips the gradient, advances the accumulators, builds features, runs the
/// MLP, composes the update, orthogonalizes it (rank >= 2 when enabled) and
/// normalizes. Returns the update (to be added to the parameter) and the new
/// slot.
pub fn celo_step(
    param: &Tensor,
    grad: &Tensor,
    slot: &TensorSlot,
    theta: &UpdateRuleParams,
    cfg: &UpdateRuleConfig,
    acc_cfg: &AccumulatorConfig,
) -> Result<(Tensor, TensorSlot)> {
    let clip = cfg.grad_clip as f32;
    let grad = grad.map(|g| g.clamp(-clip, clip));
    let (acc, fac) = update_tensor(&slot.acc, &grad, acc_cfg)?;
    let features = build_features(param, &grad, &acc.mom, &acc.rms, &fac, cfg.norm_eps)?;
    let out = mlp_forward(theta, &features)?;
    let mut delta = compose_update(&out, param.shape(), cfg)?;
    if cfg.orthogonalize && param.rank() >= 2 {
        delta = newton_schulz(&delta, &cfg.ns)?;
    }
    let (delta, output_rms_sum) = normalize_output(&delta, cfg, slot.output_rms_sum);
    Ok((delta, TensorSlot { acc, output_rms_sum }))
}
