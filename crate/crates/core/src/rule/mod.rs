//! The learned per-parameter update rule.

pub mod config;
pub mod features;
pub mod mlp;
pub mod newton_schulz;
pub mod output;
mod step;

pub use config::{Activation, NormVariant, NsConfig, UpdateForm, UpdateRuleConfig};
pub use features::{build_features, FeatureBlock, CHANNEL_NAMES, NUM_CHANNELS};
pub use mlp::{layer_widths, mlp_forward, MlpOutput, UpdateRuleParams};
pub use newton_schulz::newton_schulz;
pub use output::{compose_update, normalize_output};
pub use step::celo_step;
