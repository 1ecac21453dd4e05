use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accumulators::AccumulatorConfig;
use crate::error::{Error, Result};
use crate::optim::{chain, scale_by_lr, AdamConfig, Chain, OptState, ScaleByAdam, Transform};
use crate::rng::{label, Rng};
use crate::rule::{UpdateRuleConfig, UpdateRuleParams};
use crate::tasks::{TaskDistribution, TaskDistributionConfig};
use crate::tree::ParamTree;

use super::lopt::{InnerSettings, LoptFactory};
use super::pes::{Estimator, Pes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetaObjective {
    /// Raw mean of inner training losses over each segment.
    MeanLoss,
    /// Mean of per-step losses capped at `loss_clip_factor * ln(classes)`.
    ClippedMeanLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub outer_steps: u64,
    /// Truncation length (inner steps per outer step).
    pub k: u32,
    pub unroll_min: u64,
    pub unroll_max: u64,
    pub n_particles: u32,
    pub sigma: f64,
    pub outer_lr: f64,
    pub outer_adam: AdamConfig,
    /// Constant inner step size applied after the learned rule.
    pub inner_lr: f64,
    pub meta_objective: MetaObjective,
    /// Cap multiplier for [`MetaObjective::ClippedMeanLoss`].
    pub loss_clip_factor: f64,
    pub estimator: Estimator,
    pub seed: u64,
    /// Outer steps between META_STATE checkpoints (0 disables).
    pub checkpoint_every: u64,
    pub rule: UpdateRuleConfig,
    pub accumulators: AccumulatorConfig,
    pub tasks: TaskDistributionConfig,
    /// Root for IDX datasets; blobs need no data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<std::path::PathBuf>,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            outer_steps: 2000,
            k: 50,
            unroll_min: 100,
            unroll_max: 2000,
            n_particles: 8,
            sigma: 0.01,
            outer_lr: 3e-4,
            outer_adam: AdamConfig::default(),
            inner_lr: 1e-3,
            meta_objective: MetaObjective::MeanLoss,
            loss_clip_factor: 1.5,
            estimator: Estimator::Pes,
            seed: 0,
            checkpoint_every: 500,
            rule: UpdateRuleConfig::base(),
            accumulators: AccumulatorConfig::default(),
            tasks: TaskDistributionConfig::default(),
            data_dir: None,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k == 0 || u64::from(self.k) > self.unroll_min {
            return fail(format!("need 1 <= k <= unroll_min (k = {}, unroll_min = {})", self.k, self.unroll_min));
        }
        if self.unroll_min < 1 || self.unroll_max < self.unroll_min {
            return fail("need 1 <= unroll_min <= unroll_max".into());
        }
        if self.n_particles == 0 || !self.n_particles.is_multiple_of(2) {
            return fail(format!("n_particles must be even and positive (got {})", self.n_particles));
        }
        if !(self.sigma > 0.0) {
            return fail("sigma must be positive".into());
        }
        if !(self.outer_lr > 0.0 && self.inner_lr > 0.0) {
            return fail("outer_lr and inner_lr must be positive".into());
        }
        if self.meta_objective == MetaObjective::ClippedMeanLoss && !(self.loss_clip_factor > 0.0) {
            return fail("loss_clip_factor must be positive".into());
        }
        self.outer_adam.validate()?;
        self.rule.validate()?;
        self.accumulators.validate()?;
        Ok(())
    }

    /// Randomly initialized rule parameters for this config's seed; meta-training starts here.
    pub fn initial_theta(&self) -> UpdateRuleParams {
        UpdateRuleParams::init(&self.rule, &mut Rng::new(self.seed, label("meta/theta")))
    }
}

/// One row of the meta-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLogRecord {
    pub step: u64,
    pub meta_loss: f64,
    pub grad_norm: f64,
    pub resets: u64,
    pub finished: u64,
    pub wall_ms: u64,
}

impl MetaLogRecord {
    pub const HEADER: &'static str = "step,meta_loss,grad_norm,resets,finished,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.meta_loss, self.grad_norm, self.resets, self.finished, self.wall_ms
        )
    }
}

fn outer_transform(cfg: &MetaTrainConfig) -> Chain {
    chain(vec![
        Box::new(ScaleByAdam(cfg.outer_adam.clone())),
        Box::new(scale_by_lr(cfg.outer_lr)),
    ])
}

/// Outer loop state: rule parameters, outer Adam state and the particles.
pub struct MetaTrainer {
    pub cfg: MetaTrainConfig,
    pub theta: ParamTree,
    pub outer_state: OptState,
    pub pes: Pes<LoptFactory>,
    /// Completed outer steps.
    pub step: u64,
    /// Report zero wall time so logs are reproducible byte-for-byte.
    pub deterministic: bool,
    outer: Chain,
}

impl MetaTrainer {
    pub fn factory(cfg: &MetaTrainConfig, data_dir: Option<&std::path::Path>) -> Result<LoptFactory> {
        Ok(LoptFactory {
            tasks: TaskDistribution::new(cfg.tasks.clone(), data_dir)?,
            settings: Arc::new(InnerSettings {
                rule: cfg.rule.clone(),
                acc: cfg.accumulators.clone(),
                inner_lr: cfg.inner_lr,
                unroll_min: cfg.unroll_min,
                unroll_max: cfg.unroll_max,
                loss_cap: match cfg.meta_objective {
                    MetaObjective::MeanLoss => None,
                    MetaObjective::ClippedMeanLoss => Some(cfg.loss_clip_factor),
                },
            }),
        })
    }

    pub fn new(cfg: MetaTrainConfig, data_dir: Option<&std::path::Path>) -> Result<Self> {
        cfg.validate()?;
        let theta = cfg.initial_theta().to_tree();
        let factory = Self::factory(&cfg, data_dir)?;
        let pes = Pes::new(
            factory,
            &theta,
            cfg.n_particles as usize,
            cfg.sigma,
            cfg.estimator,
            cfg.seed,
        )?;
        let outer = outer_transform(&cfg);
        let outer_state = outer.init(&theta)?;
        Ok(Self {
            cfg,
            theta,
            outer_state,
            pes,
            step: 0,
            deterministic: false,
            outer,
        })
    }

    /// Reassembles a trainer from saved parts.
    pub fn from_parts(cfg: MetaTrainConfig, theta: ParamTree, outer_state: OptState, pes: Pes<LoptFactory>, step: u64) -> Self {
        let outer = outer_transform(&cfg);
        Self {
            cfg,
            theta,
            outer_state,
            pes,
            step,
            deterministic: false,
            outer,
        }
    }

    pub fn rule_params(&self) -> Result<UpdateRuleParams> {
        UpdateRuleParams::from_tree(&self.theta, &self.cfg.rule)
    }

    /// One truncation for every particle followed by an outer Adam step.
    pub fn step_once(&mut self) -> Result<MetaLogRecord> {
        let start = Instant::now();
        let est = self.pes.step(&self.theta, u64::from(self.cfg.k))?;
        let updates = self.outer.update(&est.grad, &mut self.outer_state, &self.theta)?;
        let next = self.theta.add(&updates)?;
        if !next.all_finite() {
            return Err(Error::NonFinite("meta-parameters".into()));
        }
        self.theta = next;
        self.step += 1;
        Ok(MetaLogRecord {
            step: self.step,
            meta_loss: est.mean_loss,
            grad_norm: est.grad.global_norm(),
            resets: est.resets,
            finished: est.finished,
            wall_ms: if self.deterministic {
                0
            } else {
                start.elapsed().as_millis() as u64
            },
        })
    }
}
