use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rule::{newton_schulz, NsConfig};
use crate::tree::ParamTree;

use super::{OptState, Transform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuonConfig {
    pub beta: f64,
    pub ns: NsConfig,
    pub rms_multiplier: f64,
}

impl Default for MuonConfig {
    fn default() -> Self {
        Self {
            beta: 0.95,
            ns: NsConfig::default(),
            rms_multiplier: 0.2,
        }
    }
}

/// EMA momentum, orthogonalized (rank >= 2), then scaled to RMS `rms_multiplier`.
pub struct ScaleByMuon(pub MuonConfig);

impl Transform for ScaleByMuon {
    fn init(&self, params: &ParamTree) -> Result<OptState> {
        Ok(OptState::Trace {
            momentum: params.zeros_like(),
        })
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, _: &ParamTree) -> Result<ParamTree> {
        let OptState::Trace { momentum } = state else {
            return Err(Error::State("Trace"));
        };
        let b = self.0.beta;
        *momentum = grads.zip2(momentum, |_, g, m| {
            g.zip_map(m, |g, m| (b * f64::from(m) + (1.0 - b) * f64::from(g)) as f32)
        })?;
        momentum.try_map(|_, m| {
            let o = if m.rank() >= 2 {
                newton_schulz(m, &self.0.ns)?
            } else {
                m.clone()
            };
            let k = self.0.rms_multiplier / (o.rms() + 1e-30);
            Ok(o.map(|v| (f64::from(v) * k) as f32))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_is_normalized_ns_of_gradient() {
        let cfg = MuonConfig::default();
        let t = ScaleByMuon(cfg.clone());
        let g = Tensor::normal(&mut Rng::new(5, 0), &[4, 6]);
        let tree = ParamTree::new(vec![("w".into(), g.clone())]).unwrap();
        let mut s = t.init(&tree).unwrap();
        let u = t.update(&tree, &mut s, &tree).unwrap();
        let u = u.get("w").unwrap();
        assert!((u.rms() - 0.2).abs() < 1e-5);
        let direct = newton_schulz(&g.scale(0.05).unwrap(), &cfg.ns).unwrap();
        let k = 0.2 / direct.rms();
        for (a, b) in u.data().iter().zip(direct.data()) {
            assert!((f64::from(*a) - f64::from(*b) * k).abs() < 1e-5);
        }
    }
}
