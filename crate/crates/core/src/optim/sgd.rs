use crate::error::{Error, Result};
use crate::tree::ParamTree;

use super::{OptState, Transform};

/// Heavy-ball momentum: `m = g + beta * m`, update `m`.
pub struct Trace {
    pub beta: f64,
}

impl Transform for Trace {
    fn init(&self, params: &ParamTree) -> Result<OptState> {
        Ok(OptState::Trace {
            momentum: params.zeros_like(),
        })
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, _: &ParamTree) -> Result<ParamTree> {
        let OptState::Trace { momentum } = state else {
            return Err(Error::State("Trace"));
        };
        let b = self.beta;
        let next = grads.zip2(momentum, |_, g, m| g.zip_map(m, |g, m| (f64::from(g) + b * f64::from(m)) as f32))?;
        *momentum = next.clone();
        Ok(next)
    }
}
