use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::accumulators::AccumulatorConfig;
use crate::error::{Error, Result};
use crate::rule::{UpdateRuleConfig, UpdateRuleParams};
use crate::tree::ParamTree;

use super::{
    AdamConfig, CeloTransform, MultiTransform, MuonConfig, OptState, Schedule, ScaleByAdam, ScaleByMuon, Trace,
    Transform,
};

/// Named optimizers available to the evaluation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerName {
    /// Learned rule with orthogonalization on rank >= 2 tensors, Adam on the rest.
    Celo2,
    /// Learned rule on every tensor, no orthogonalization.
    Celo2Base,
    /// [`Celo2`](Self::Celo2) with an RMS multiplier of 0.2.
    Celo2Rms02,
    Adamw,
    Sgdm,
    /// Muon on rank >= 2 tensors, Adam on the rest.
    Muon,
}

impl OptimizerName {
    pub const ALL: [OptimizerName; 6] = [
        OptimizerName::Celo2,
        OptimizerName::Celo2Base,
        OptimizerName::Celo2Rms02,
        OptimizerName::Adamw,
        OptimizerName::Sgdm,
        OptimizerName::Muon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerName::Celo2 => "CELO2",
            OptimizerName::Celo2Base => "CELO2_BASE",
            OptimizerName::Celo2Rms02 => "CELO2_RMS02",
            OptimizerName::Adamw => "ADAMW",
            OptimizerName::Sgdm => "SGDM",
            OptimizerName::Muon => "MUON",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, OptimizerName::Celo2 | OptimizerName::Celo2Base | OptimizerName::Celo2Rms02)
    }

    /// Learned-rule settings this optimizer imposes on a checkpoint's config.
    pub fn rule_config(self, base: &UpdateRuleConfig) -> UpdateRuleConfig {
        let mut cfg = base.clone();
        match self {
            OptimizerName::Celo2 => {
                cfg.orthogonalize = true;
                cfg.rms_multiplier = 1.0;
            }
            OptimizerName::Celo2Rms02 => {
                cfg.orthogonalize = true;
                cfg.rms_multiplier = 0.2;
            }
            OptimizerName::Celo2Base => {
                cfg.orthogonalize = false;
                cfg.rms_multiplier = 1.0;
            }
            _ => {}
        }
        cfg
    }
}

impl fmt::Display for OptimizerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL.into_iter().find(|o| o.as_str() == norm).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|o| o.as_str()).collect();
            Error::Config(format!("unknown optimizer '{s}'; valid names: {}", names.join(", ")))
        })
    }
}

/// Learned-rule ingredients loaded from a checkpoint.
#[derive(Clone, Debug)]
pub struct LearnedRule {
    pub theta: Arc<UpdateRuleParams>,
    pub cfg: UpdateRuleConfig,
    pub acc_cfg: AccumulatorConfig,
}

/// Per-step diagnostics from [`Pipeline::update_with_stats`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// RMS of the direction before weight decay and learning rate.
    pub update_rms: f64,
    pub lr: f64,
}

/// `direction -> add_decayed_weights(wd) -> scale_by_schedule`, with access to
/// the intermediate direction. State is `Chain([direction, Count(step)])`.
pub struct Pipeline {
    direction: Box<dyn Transform>,
    weight_decay: f64,
    schedule: Schedule,
}

pub type PipelineState = OptState;

impl Pipeline {
    pub fn new(direction: Box<dyn Transform>, weight_decay: f64, schedule: Schedule) -> Self {
        Self {
            direction,
            weight_decay,
            schedule,
        }
    }

    /// Builds a named optimizer. Learned optimizers need `learned`.
    pub fn named(
        name: OptimizerName,
        learned: Option<&LearnedRule>,
        adam: &AdamConfig,
        weight_decay: f64,
        schedule: Schedule,
    ) -> Result<Self> {
        let adam_t = || -> Box<dyn Transform> { Box::new(ScaleByAdam(adam.clone())) };
        let direction: Box<dyn Transform> = match name {
            OptimizerName::Adamw => adam_t(),
            OptimizerName::Sgdm => Box::new(Trace { beta: 0.9 }),
            OptimizerName::Muon => Box::new(MultiTransform::by_rank(
                2,
                Vec::new(),
                Box::new(ScaleByMuon(MuonConfig::default())),
                adam_t(),
            )),
            OptimizerName::Celo2 | OptimizerName::Celo2Rms02 | OptimizerName::Celo2Base => {
                let rule = learned.ok_or_else(|| Error::Config(format!("{name} requires a checkpoint")))?;
                let celo = Box::new(CeloTransform::new(
                    rule.theta.clone(),
                    name.rule_config(&rule.cfg),
                    rule.acc_cfg.clone(),
                ));
                if name == OptimizerName::Celo2Base {
                    celo
                } else {
                    Box::new(MultiTransform::by_rank(2, Vec::new(), celo, adam_t()))
                }
            }
        };
        Ok(Self::new(direction, weight_decay, schedule))
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn update_with_stats(
        &self,
        grads: &ParamTree,
        state: &mut OptState,
        params: &ParamTree,
    ) -> Result<(ParamTree, StepStats)> {
        let OptState::Chain(parts) = state else {
            return Err(Error::State("Chain"));
        };
        let [dir_state, OptState::Count(count)] = parts.as_mut_slice() else {
            return Err(Error::State("Chain"));
        };
        let dir = self.direction.update(grads, dir_state, params)?;
        let update_rms = dir.global_rms();
        let lr = self.schedule.value(*count);
        *count += 1;
        let wd = self.weight_decay;
        let updates = dir.zip2(params, |_, u, p| {
            u.zip_map(p, |u, p| (-lr * (f64::from(u) + wd * f64::from(p))) as f32)
        })?;
        Ok((updates, StepStats { update_rms, lr }))
    }
}

impl Transform for Pipeline {
    fn init(&self, params: &ParamTree) -> Result<OptState> {
        Ok(OptState::Chain(vec![self.direction.init(params)?, OptState::Count(0)]))
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, params: &ParamTree) -> Result<ParamTree> {
        Ok(self.update_with_stats(grads, state, params)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{add_decayed_weights, chain, scale_by_schedule};
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn parses_names() {
        assert_eq!("celo2".parse::<OptimizerName>().unwrap(), OptimizerName::Celo2);
        assert_eq!("celo2-base".parse::<OptimizerName>().unwrap(), OptimizerName::Celo2Base);
        let err = "lion".parse::<OptimizerName>().unwrap_err().to_string();
        assert!(err.contains("ADAMW") && err.contains("MUON"));
    }

    #[test]
    fn learned_requires_rule() {
        let r = Pipeline::named(OptimizerName::Celo2, None, &AdamConfig::default(), 0.0, Schedule::constant(1.0));
        assert!(r.is_err());
    }

    #[test]
    fn pipeline_equals_explicit_chain() {
        let params = ParamTree::new(vec![
            ("b".into(), Tensor::from_vec(vec![0.1, -0.2])),
            ("w".into(), Tensor::normal(&mut Rng::new(1, 0), &[3, 2])),
        ])
        .unwrap();
        let grads = params.map(|_, t| t.map(|v| v * 0.5 + 0.1));
        let sched = Schedule::linear_decay(0.01, 10);
        let p = Pipeline::named(OptimizerName::Adamw, None, &AdamConfig::default(), 0.1, sched.clone()).unwrap();
        let c = chain(vec![
            Box::new(ScaleByAdam(AdamConfig::default())),
            Box::new(add_decayed_weights(0.1)),
            Box::new(scale_by_schedule(sched)),
        ]);
        let (mut sp, mut sc) = (p.init(&params).unwrap(), c.init(&params).unwrap());
        for _ in 0..3 {
            let a = p.update(&grads, &mut sp, &params).unwrap();
            let b = c.update(&grads, &mut sc, &params).unwrap();
            for (x, y) in a.flatten().iter().zip(b.flatten()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
