use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Activation {
    Relu,
}

/// How the MLP outputs are combined into a raw update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UpdateForm {
    /// `lambda1 * d`
    DOnly,
    /// `lambda1 * d * exp(lambda2 * m)`
    DExpM,
    /// `lambda1 * d * exp(lambda2 * mean(m))`
    DExpMAvg,
}

impl UpdateForm {
    /// Width of the MLP output layer.
    pub fn output_width(self) -> usize {
        match self {
            UpdateForm::DOnly => 1,
            UpdateForm::DExpM | UpdateForm::DExpMAvg => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NormVariant {
    Raw,
    Norm,
    RollingNorm,
    RollingNormClip,
    NormClip,
}

impl NormVariant {
    pub fn is_clip(self) -> bool {
        matches!(self, NormVariant::RollingNormClip | NormVariant::NormClip)
    }
}

/// Newton-Schulz quintic iteration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NsConfig {
    pub coeffs: [f64; 3],
    pub iters: u32,
    pub eps: f64,
}

impl Default for NsConfig {
    fn default() -> Self {
        Self {
            coeffs: [3.4445, -4.7750, 2.0315],
            iters: 5,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateRuleConfig {
    pub hidden_size: u32,
    pub hidden_layers: u32,
    pub activation: Activation,
    pub update_form: UpdateForm,
    pub lambda1: f64,
    pub lambda2: f64,
    pub orthogonalize: bool,
    pub norm_variant: NormVariant,
    pub clip_tau: f64,
    /// Epsilon inside the input-feature normalizer.
    pub norm_eps: f64,
    pub rms_multiplier: f64,
    pub ns: NsConfig,
    pub grad_clip: f64,
}

impl Default for UpdateRuleConfig {
    fn default() -> Self {
        Self {
            hidden_size: 8,
            hidden_layers: 2,
            activation: Activation::Relu,
            update_form: UpdateForm::DOnly,
            lambda1: 0.001,
            lambda2: 0.001,
            orthogonalize: true,
            norm_variant: NormVariant::Norm,
            clip_tau: 1.0,
            norm_eps: 1e-9,
            rms_multiplier: 1.0,
            ns: NsConfig::default(),
            grad_clip: 1000.0,
        }
    }
}

impl UpdateRuleConfig {
    /// The base variant: no orthogonalization, per-step RMS normalization.
    pub fn base() -> Self {
        Self {
            orthogonalize: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden_size < 1 {
            return fail("hidden_size must be >= 1");
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return fail("lambda1 and lambda2 must be positive");
        }
        if self.norm_variant.is_clip() && !(self.clip_tau > 0.0) {
            return fail("clip_tau must be positive for clip variants");
        }
        if !(self.rms_multiplier > 0.0) {
            return fail("rms_multiplier must be positive");
        }
        if !(self.norm_eps >= 0.0) {
            return fail("norm_eps must be non-negative");
        }
        if self.ns.iters < 1 {
            return fail("ns.iters must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }
}
