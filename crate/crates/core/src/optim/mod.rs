//! Composable gradient transformations.
//!
//! A [`Transform`] maps gradients to updates and owns an [`OptState`]. The
//! final update is added to the parameters with [`apply_updates`]; the step
//! size sign is baked into [`ScaleBySchedule`], so a typical chain is
//! `direction -> add_decayed_weights(wd) -> scale_by_schedule(lr)`.

mod adam;
mod celo;
mod multi;
mod muon;
mod presets;
mod schedule;
mod sgd;

pub use adam::{adam_direction, adam_moments, adamw_step, AdamConfig, ScaleByAdam};
pub use celo::CeloTransform;
pub use multi::{LabelFn, MultiTransform};
pub use muon::{MuonConfig, ScaleByMuon};
pub use presets::{LearnedRule, OptimizerName, Pipeline, PipelineState, StepStats};
pub use schedule::{Schedule, ScheduleKind};
pub use sgd::Trace;

use crate::accumulators::CeloState;
use crate::error::{Error, Result};
use crate::tree::{Label, ParamTree};

/// State owned by a [`Transform`]. The variant mirrors the transform kind.
#[derive(Clone, Debug, PartialEq)]
pub enum OptState {
    Empty,
    Count(u64),
    Adam { count: u64, mu: ParamTree, nu: ParamTree },
    Trace { momentum: ParamTree },
    Celo(CeloState),
    Chain(Vec<OptState>),
    Multi(Vec<(Label, OptState)>),
}

pub trait Transform: Send + Sync {
    fn init(&self, params: &ParamTree) -> Result<OptState>;

    /// Maps `grads` to updates, advancing `state`. `params` is read-only.
    fn update(&self, grads: &ParamTree, state: &mut OptState, params: &ParamTree) -> Result<ParamTree>;
}

impl<T: Transform + ?Sized> Transform for Box<T> {
    fn init(&self, params: &ParamTree) -> Result<OptState> {
        (**self).init(params)
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, params: &ParamTree) -> Result<ParamTree> {
        (**self).update(grads, state, params)
    }
}

/// `p + u`.
pub fn apply_updates(params: &ParamTree, updates: &ParamTree) -> Result<ParamTree> {
    params.add(updates)
}

pub struct Identity;

impl Transform for Identity {
    fn init(&self, _: &ParamTree) -> Result<OptState> {
        Ok(OptState::Empty)
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, _: &ParamTree) -> Result<ParamTree> {
        match state {
            OptState::Empty => Ok(grads.clone()),
            _ => Err(Error::State("Empty")),
        }
    }
}

/// Applies transforms left to right, one state per link.
pub struct Chain {
    links: Vec<Box<dyn Transform>>,
}

pub fn chain(links: Vec<Box<dyn Transform>>) -> Chain {
    Chain { links }
}

impl Transform for Chain {
    fn init(&self, params: &ParamTree) -> Result<OptState> {
        if self.links.is_empty() {
            return Err(Error::Config("chain needs at least one transform".into()));
        }
        Ok(OptState::Chain(
            self.links.iter().map(|t| t.init(params)).collect::<Result<_>>()?,
        ))
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, params: &ParamTree) -> Result<ParamTree> {
        let OptState::Chain(states) = state else {
            return Err(Error::State("Chain"));
        };
        if states.len() != self.links.len() {
            return Err(Error::State("Chain"));
        }
        let mut u = grads.clone();
        for (t, s) in self.links.iter().zip(states.iter_mut()) {
            u = t.update(&u, s, params)?;
        }
        Ok(u)
    }
}

/// Decoupled weight decay: `u + alpha * p`.
pub struct AddDecayedWeights(pub f64);

pub fn add_decayed_weights(alpha: f64) -> AddDecayedWeights {
    AddDecayedWeights(alpha)
}

impl Transform for AddDecayedWeights {
    fn init(&self, _: &ParamTree) -> Result<OptState> {
        Ok(OptState::Empty)
    }

    fn update(&self, grads: &ParamTree, _: &mut OptState, params: &ParamTree) -> Result<ParamTree> {
        if self.0 == 0.0 {
            params.check_same_structure(grads)?;
            return Ok(grads.clone());
        }
        let a = self.0;
        grads.zip2(params, |_, u, p| {
            u.zip_map(p, |u, p| (f64::from(u) + a * f64::from(p)) as f32)
        })
    }
}

/// Multiplies updates by `-lr(count)`; `count` starts at 0 and advances once per update.
pub struct ScaleBySchedule(pub Schedule);

pub fn scale_by_schedule(s: Schedule) -> ScaleBySchedule {
    ScaleBySchedule(s)
}

/// Constant-rate shorthand for [`scale_by_schedule`].
pub fn scale_by_lr(lr: f64) -> ScaleBySchedule {
    ScaleBySchedule(Schedule::constant(lr))
}

impl Transform for ScaleBySchedule {
    fn init(&self, _: &ParamTree) -> Result<OptState> {
        Ok(OptState::Count(0))
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, _: &ParamTree) -> Result<ParamTree> {
        let OptState::Count(count) = state else {
            return Err(Error::State("Count"));
        };
        let lr = self.0.value(*count);
        *count += 1;
        grads.try_map(|_, u| Ok(u.map(|v| (-lr * f64::from(v)) as f32)))
    }
}
