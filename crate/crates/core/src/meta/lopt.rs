//! The learned optimizer as a PES particle.

use std::sync::Arc;

use crate::accumulators::AccumulatorConfig;
use crate::error::{Error, Result};
use crate::optim::{chain, scale_by_lr, CeloTransform, OptState, Transform};
use crate::rng::{label, Rng};
use crate::rule::{UpdateRuleConfig, UpdateRuleParams};
use crate::tasks::{TaskDistribution, TaskInstance};
use crate::tree::ParamTree;

use super::pes::{Particle, ParticleFactory, Segment};

/// `round(exp(U(ln min, ln max)))`, kept within `[min, max]`.
pub fn sample_unroll_length(rng: &mut Rng, min: u64, max: u64) -> u64 {
    let (lo, hi) = ((min.max(1) as f64).ln(), (max.max(min).max(1) as f64).ln());
    let v = rng.uniform(lo, hi).exp().round() as u64;
    v.clamp(min.max(1), max.max(min).max(1))
}

/// Inner-loop settings shared by every particle.
#[derive(Clone, Debug)]
pub struct InnerSettings {
    pub rule: UpdateRuleConfig,
    pub acc: AccumulatorConfig,
    pub inner_lr: f64,
    pub unroll_min: u64,
    pub unroll_max: u64,
    /// When set, each step's loss counts as at most `cap * ln(classes)`.
    pub loss_cap: Option<f64>,
}

fn inner_transform(theta: Arc<UpdateRuleParams>, s: &InnerSettings) -> impl Transform {
    chain(vec![
        Box::new(CeloTransform::new(theta, s.rule.clone(), s.acc.clone())),
        Box::new(scale_by_lr(s.inner_lr)),
    ])
}

/// One inner training run driven by the learned rule.
#[derive(Clone, Debug)]
pub struct LoptParticle {
    pub seed: u64,
    pub task: TaskInstance,
    pub opt_state: OptState,
    pub unroll_len: u64,
    settings: Arc<InnerSettings>,
}

impl LoptParticle {
    pub fn settings(&self) -> &InnerSettings {
        &self.settings
    }
}

impl Particle for LoptParticle {
    fn unroll(&mut self, meta: &ParamTree, k: u64) -> Result<Segment> {
        let theta = Arc::new(UpdateRuleParams::from_tree(meta, &self.settings.rule)?);
        let opt = inner_transform(theta, &self.settings);
        let cap = self
            .settings
            .loss_cap
            .map_or(f64::INFINITY, |c| c * (self.task.data.train.classes as f64).ln());
        let mut sum = 0.0;
        let mut n = 0u64;
        while n < k && self.task.step < self.unroll_len {
            let (loss, grads) = self.task.train_loss_and_grad()?;
            let updates = opt.update(&grads, &mut self.opt_state, &self.task.params)?;
            self.task.apply(&updates)?;
            sum += loss.min(cap);
            n += 1;
        }
        if n == 0 {
            return Err(Error::State("particle with a non-empty unroll"));
        }
        Ok(Segment {
            mean_loss: sum / n as f64,
            steps: n,
            finished: self.task.step >= self.unroll_len,
        })
    }
}

pub struct LoptFactory {
    pub tasks: TaskDistribution,
    pub settings: Arc<InnerSettings>,
}

impl LoptFactory {
    /// Unroll length for a task seed.
    pub fn unroll_len(&self, seed: u64) -> u64 {
        let s = &self.settings;
        sample_unroll_length(&mut Rng::new(seed, label("meta/unroll")), s.unroll_min, s.unroll_max)
    }
}

impl ParticleFactory for LoptFactory {
    type P = LoptParticle;

    fn spawn(&self, seed: u64) -> Result<LoptParticle> {
        let task = self.tasks.sample(seed)?;
        // the rule's parameters do not affect the state layout
        let opt_state = OptState::Chain(vec![
            OptState::Celo(crate::accumulators::init_state(&task.params)),
            OptState::Count(0),
        ]);
        Ok(LoptParticle {
            seed,
            task,
            opt_state,
            unroll_len: self.unroll_len(seed),
            settings: self.settings.clone(),
        })
    }
}
