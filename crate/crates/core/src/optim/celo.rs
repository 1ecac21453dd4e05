use std::sync::Arc;

use crate::accumulators::{init_state, AccumulatorConfig};
use crate::error::{Error, Result};
use crate::rule::{celo_step, UpdateRuleConfig, UpdateRuleParams};
use crate::tree::ParamTree;

use super::{OptState, Transform};

/// The learned rule as a transform. Outputs the normalized update direction;
/// weight decay and the learning rate are applied by later links.
pub struct CeloTransform {
    pub theta: Arc<UpdateRuleParams>,
    pub cfg: UpdateRuleConfig,
    pub acc_cfg: AccumulatorConfig,
}

impl CeloTransform {
    pub fn new(theta: Arc<UpdateRuleParams>, cfg: UpdateRuleConfig, acc_cfg: AccumulatorConfig) -> Self {
        Self { theta, cfg, acc_cfg }
    }
}

impl Transform for CeloTransform {
    fn init(&self, params: &ParamTree) -> Result<OptState> {
        Ok(OptState::Celo(init_state(params)))
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, params: &ParamTree) -> Result<ParamTree> {
        let OptState::Celo(st) = state else {
            return Err(Error::State("Celo"));
        };
        grads.check_same_structure(params)?;
        if st.slots.len() != grads.len() || st.slots.iter().zip(grads.paths()).any(|((a, _), b)| a != b) {
            return Err(Error::Structure("celo state paths differ from gradients".into()));
        }
        let mut out = Vec::with_capacity(grads.len());
        for (((path, g), p), (_, slot)) in grads.iter().zip(params.tensors()).zip(st.slots.iter_mut()) {
            let (delta, next) = celo_step(p, g, slot, &self.theta, &self.cfg, &self.acc_cfg)?;
            *slot = next;
            out.push((path.to_string(), delta));
        }
        st.step += 1;
        ParamTree::new(out)
    }
}
