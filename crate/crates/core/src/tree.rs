//! Named, ordered parameter collections.
//!
//! A [`ParamTree`] is a flat list of `(path, tensor)` pairs kept in
//! lexicographic path order. Parameters, gradients, updates and per-tensor
//! optimizer state for one model all share the same path set, so structural
//! operations (`map`, `zip2`, `zip3`) line entries up by position after a
//! path/shape check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamTree {
    entries: Vec<(String, Tensor)>,
}

impl ParamTree {
    /// Builds a tree, sorting entries into canonical order. Duplicate paths are rejected.
    pub fn new(mut entries: Vec<(String, Tensor)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Structure(format!("duplicate path '{}'", w[0].0)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(p, t)| (p.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(p, t)| (p.as_str(), t))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(p, _)| p.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries
            .binary_search_by(|(p, _)| p.as_str().cmp(path))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, f: impl Fn(&str, &Tensor) -> Tensor) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(p, t)| (p.clone(), f(p, t)))
                .collect(),
        }
    }

    pub fn try_map(&self, f: impl Fn(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|(p, t)| Ok((p.clone(), f(p, t)?)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    /// Checks that `other` has the same paths and per-path shapes.
    pub fn check_same_structure(&self, other: &ParamTree) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Structure(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((pa, ta), (pb, tb)) in self.entries.iter().zip(&other.entries) {
            if pa != pb {
                return Err(Error::Structure(format!("path '{pa}' vs '{pb}'")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Structure(format!(
                    "'{pa}': shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zip2(
        &self,
        other: &ParamTree,
        f: impl Fn(&str, &Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Self> {
        self.check_same_structure(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((p, a), (_, b))| Ok((p.clone(), f(p, a, b)?)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn zip3(
        &self,
        b: &ParamTree,
        c: &ParamTree,
        f: impl Fn(&str, &Tensor, &Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Self> {
        self.check_same_structure(b)?;
        self.check_same_structure(c)?;
        let entries = self
            .entries
            .iter()
            .zip(&b.entries)
            .zip(&c.entries)
            .map(|(((p, x), (_, y)), (_, z))| Ok((p.clone(), f(p, x, y, z)?)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn add(&self, other: &ParamTree) -> Result<Self> {
        self.zip2(other, |_, a, b| a.add(b))
    }

    pub fn scale(&self, c: f32) -> Result<Self> {
        self.try_map(|_, t| t.scale(c))
    }

    /// Global L2 norm over all entries (f64 accumulation).
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, t)| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Global RMS over all scalar values.
    pub fn global_rms(&self) -> f64 {
        let n = self.num_values();
        if n == 0 {
            return 0.0;
        }
        let ss: f64 = self.entries.iter().map(|(_, t)| t.sum_squares()).sum();
        (ss / n as f64).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }

    /// Sub-tree restricted to the given paths (must all exist).
    pub fn select<'a>(&self, paths: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let entries = paths
            .into_iter()
            .map(|p| {
                self.get(p)
                    .map(|t| (p.to_string(), t.clone()))
                    .ok_or_else(|| Error::Structure(format!("missing path '{p}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    /// Union of disjoint trees.
    pub fn merge(parts: Vec<ParamTree>) -> Result<Self> {
        Self::new(parts.into_iter().flat_map(|t| t.entries).collect())
    }

    /// Prefixes every path with `prefix/`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(p, t)| (format!("{prefix}/{p}"), t.clone()))
                .collect(),
        }
    }

    /// Entries under `prefix/`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        let lead = format!("{prefix}/");
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|(p, t)| p.strip_prefix(&lead).map(|rest| (rest.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Flattens all values in canonical order.
    pub fn flatten(&self) -> Vec<f32> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }
}

/// Which update rule a parameter is routed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    LearnedRule,
    HandRule,
}

/// One label per path, in the tree's canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLabels {
    labels: Vec<(String, Label)>,
}

impl ParamLabels {
    pub fn new(tree: &ParamTree, f: impl Fn(&str, &Tensor) -> Label) -> Self {
        Self {
            labels: tree.iter().map(|(p, t)| (p.to_string(), f(p, t))).collect(),
        }
    }

    pub fn get(&self, path: &str) -> Option<Label> {
        self.labels.iter().find(|(p, _)| p == path).map(|(_, l)| *l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Label)> {
        self.labels.iter().map(|(p, l)| (p.as_str(), *l))
    }

    pub fn paths_with(&self, label: Label) -> Vec<&str> {
        self.labels
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(p, _)| p.as_str())
            .collect()
    }
}

/// Rank-based routing: tensors of rank >= `threshold_rank` go to the learned
/// rule, the rest to the hand rule. Any path containing one of
/// `hand_substrings` (e.g. `"embed"`) is forced to the hand rule.
pub fn label_by_rank(tree: &ParamTree, threshold_rank: usize, hand_substrings: &[String]) -> ParamLabels {
    ParamLabels::new(tree, |path, t| {
        if hand_substrings.iter().any(|s| path.contains(s.as_str())) || t.rank() < threshold_rank {
            Label::HandRule
        } else {
            Label::LearnedRule
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(entries: &[(&str, Tensor)]) -> ParamTree {
        ParamTree::new(entries.iter().map(|(p, t)| (p.to_string(), t.clone())).collect()).unwrap()
    }

    #[test]
    fn canonical_order_and_uniqueness() {
        let t = tree(&[("b", Tensor::scalar(1.0)), ("a", Tensor::scalar(2.0))]);
        assert_eq!(t.paths().collect::<Vec<_>>(), vec!["a", "b"]);
        let dup = ParamTree::new(vec![
            ("a".into(), Tensor::scalar(1.0)),
            ("a".into(), Tensor::scalar(2.0)),
        ]);
        assert!(dup.is_err());
    }

    #[test]
    fn map_and_zip_examples() {
        let t = tree(&[("a", Tensor::from_vec(vec![1.0])), ("b", Tensor::zeros(&[2, 2]))]);
        assert_eq!(t.map(|_, x| x.clone()), t);
        assert_eq!(t.add(&t.zeros_like()).unwrap(), t);

        let a = tree(&[("a", Tensor::from_vec(vec![1.0]))]);
        let b = tree(&[("a", Tensor::from_vec(vec![2.0]))]);
        assert_eq!(a.add(&b).unwrap().get("a").unwrap().data(), &[3.0]);
    }

    #[test]
    fn zip_rejects_structure_mismatch() {
        let a = tree(&[("a", Tensor::from_vec(vec![1.0]))]);
        let b = tree(&[("b", Tensor::from_vec(vec![1.0]))]);
        let c = tree(&[("a", Tensor::from_vec(vec![1.0, 2.0]))]);
        assert!(matches!(a.add(&b), Err(Error::Structure(_))));
        assert!(matches!(a.add(&c), Err(Error::Structure(_))));
    }

    #[test]
    fn labels_by_rank() {
        let t = tree(&[
            ("layer0/bias", Tensor::zeros(&[5])),
            ("layer0/weight", Tensor::zeros(&[4, 5])),
            ("scale", Tensor::scalar(1.0)),
            ("tok_embed", Tensor::zeros(&[10, 4])),
        ]);
        let labels = label_by_rank(&t, 2, &[]);
        assert_eq!(labels.get("layer0/bias"), Some(Label::HandRule));
        assert_eq!(labels.get("layer0/weight"), Some(Label::LearnedRule));
        assert_eq!(labels.get("scale"), Some(Label::HandRule));
        assert_eq!(labels.get("tok_embed"), Some(Label::LearnedRule));

        let labels = label_by_rank(&t, 2, &["embed".to_string()]);
        assert_eq!(labels.get("tok_embed"), Some(Label::HandRule));
        assert_eq!(labels.iter().count(), 4);
    }

    #[test]
    fn select_and_merge_round_trip() {
        let t = tree(&[
            ("a", Tensor::scalar(1.0)),
            ("b", Tensor::scalar(2.0)),
            ("c", Tensor::scalar(3.0)),
        ]);
        let left = t.select(["a", "c"]).unwrap();
        let right = t.select(["b"]).unwrap();
        assert_eq!(ParamTree::merge(vec![left, right]).unwrap(), t);
        assert_eq!(t.prefixed("x").strip_prefix("x"), t);
    }
}
