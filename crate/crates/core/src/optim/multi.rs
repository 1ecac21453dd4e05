use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tree::{label_by_rank, Label, ParamLabels, ParamTree};

use super::{OptState, Transform};

pub type LabelFn = Arc<dyn Fn(&ParamTree) -> ParamLabels + Send + Sync>;

/// Routes each tensor to the transform registered for its label.
/// States are partitioned per label.
pub struct MultiTransform {
    labeler: LabelFn,
    rules: Vec<(Label, Box<dyn Transform>)>,
}

impl MultiTransform {
    pub fn new(labeler: LabelFn, rules: Vec<(Label, Box<dyn Transform>)>) -> Self {
        Self { labeler, rules }
    }

    /// Rank >= `threshold` goes to `learned`, everything else (and any path
    /// containing one of `hand_substrings`) to `hand`.
    pub fn by_rank(
        threshold: usize,
        hand_substrings: Vec<String>,
        learned: Box<dyn Transform>,
        hand: Box<dyn Transform>,
    ) -> Self {
        Self::new(
            Arc::new(move |t: &ParamTree| label_by_rank(t, threshold, &hand_substrings)),
            vec![(Label::LearnedRule, learned), (Label::HandRule, hand)],
        )
    }

    fn labels(&self, params: &ParamTree) -> Result<ParamLabels> {
        let labels = (self.labeler)(params);
        for (path, l) in labels.iter() {
            if !self.rules.iter().any(|(r, _)| *r == l) {
                return Err(Error::Config(format!("no transform for label {l:?} (path {path})")));
            }
        }
        Ok(labels)
    }
}

impl Transform for MultiTransform {
    fn init(&self, params: &ParamTree) -> Result<OptState> {
        let labels = self.labels(params)?;
        let states = self
            .rules
            .iter()
            .map(|(l, t)| Ok((*l, t.init(&params.select(labels.paths_with(*l))?)?)))
            .collect::<Result<_>>()?;
        Ok(OptState::Multi(states))
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, params: &ParamTree) -> Result<ParamTree> {
        let OptState::Multi(states) = state else {
            return Err(Error::State("Multi"));
        };
        if states.len() != self.rules.len() {
            return Err(Error::State("Multi"));
        }
        grads.check_same_structure(params)?;
        let labels = self.labels(params)?;
        let mut parts = Vec::with_capacity(self.rules.len());
        for ((l, t), (sl, s)) in self.rules.iter().zip(states.iter_mut()) {
            if l != sl {
                return Err(Error::State("Multi"));
            }
            let paths = labels.paths_with(*l);
            let g = grads.select(paths.iter().copied())?;
            let p = params.select(paths.iter().copied())?;
            parts.push(t.update(&g, s, &p)?);
        }
        ParamTree::merge(parts)
    }
}
