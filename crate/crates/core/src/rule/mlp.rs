//! The small per-parameter MLP at the heart of the learned rule.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tree::ParamTree;

use super::config::UpdateRuleConfig;
use super::features::{FeatureBlock, NUM_CHANNELS};

/// MLP weights: `layers[i] = (W [in, out], b [out])`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRuleParams {
    pub layers: Vec<(Tensor, Tensor)>,
}

/// Layer widths `[18, hidden, ..., hidden, out]`.
pub fn layer_widths(cfg: &UpdateRuleConfig) -> Vec<usize> {
    let mut w = vec![NUM_CHANNELS];
    w.extend(std::iter::repeat_n(cfg.hidden_size as usize, cfg.hidden_layers as usize));
    w.push(cfg.update_form.output_width());
    w
}

impl UpdateRuleParams {
    /// Fan-in scaled uniform weights `U(-1/sqrt(in), 1/sqrt(in))`, zero biases.
    pub fn init(cfg: &UpdateRuleConfig, rng: &mut Rng) -> Self {
        let widths = layer_widths(cfg);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Tensor::uniform(rng, -bound, bound, &[w[0], w[1]]).expect("bound > 0");
                (weight, Tensor::zeros(&[w[1]]))
            })
            .collect();
        Self { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |(_, b)| b.len())
    }

    /// Flattens into a tree with paths `layer{i}/weight` and `layer{i}/bias`.
    pub fn to_tree(&self) -> ParamTree {
        let mut entries = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            entries.push((format!("layer{i}/weight"), w.clone()));
            entries.push((format!("layer{i}/bias"), b.clone()));
        }
        ParamTree::new(entries).expect("layer paths are unique")
    }

    /// Inverse of [`to_tree`](Self::to_tree), checked against the widths `cfg` implies.
    pub fn from_tree(tree: &ParamTree, cfg: &UpdateRuleConfig) -> Result<Self> {
        let widths = layer_widths(cfg);
        if tree.len() != 2 * (widths.len() - 1) {
            return Err(Error::Structure(format!(
                "rule tree has {} tensors, architecture needs {}",
                tree.len(),
                2 * (widths.len() - 1)
            )));
        }
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let get = |name: String, shape: &[usize]| -> Result<Tensor> {
                let t = tree
                    .get(&name)
                    .ok_or_else(|| Error::Structure(format!("missing rule tensor {name}")))?;
                if t.shape() != shape {
                    return Err(Error::shape("from_tree", format!("{name}: {:?} vs {:?}", t.shape(), shape)));
                }
                Ok(t.clone())
            };
            layers.push((get(format!("layer{i}/weight"), &[w[0], w[1]])?, get(format!("layer{i}/bias"), &[w[1]])?));
        }
        Ok(Self { layers })
    }
}

/// MLP outputs for every parameter of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpOutput {
    pub d: Vec<f32>,
    pub m: Option<Vec<f32>>,
}

/// Affine + ReLU hidden layers followed by an affine output layer.
/// Output column 0 is the direction `d`, column 1 (when present) the magnitude `m`.
pub fn mlp_forward(params: &UpdateRuleParams, features: &FeatureBlock) -> Result<MlpOutput> {
    let (n, width) = (features.matrix.shape()[0], features.matrix.shape()[1]);
    let first_in = params.layers.first().map_or(0, |(w, _)| w.shape()[0]);
    if width != first_in {
        return Err(Error::shape("mlp_forward", format!("features have {width} channels, network expects {first_in}")));
    }
    let last = params.layers.len() - 1;
    let out_w = params.output_width();
    let mut d = Vec::with_capacity(n);
    let mut m = if out_w > 1 { Some(Vec::with_capacity(n)) } else { None };

    let max_w = params.layers.iter().map(|(w, _)| w.shape()[1]).max().unwrap_or(0);
    let cap = max_w.max(width);
    let mut cur = vec![0.0f32; cap];
    let mut next = vec![0.0f32; cap];
    for row in features.matrix.data().chunks_exact(width) {
        cur[..width].copy_from_slice(row);
        let mut cur_w = width;
        for (li, (w, b)) in params.layers.iter().enumerate() {
            let out = w.shape()[1];
            let wd = w.data();
            next[..out].copy_from_slice(b.data());
            for (i, &x) in cur[..cur_w].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (acc, &wv) in next[..out].iter_mut().zip(&wd[i * out..(i + 1) * out]) {
                    *acc += x * wv;
                }
            }
            if li < last {
                for v in &mut next[..out] {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut cur, &mut next);
            cur_w = out;
        }
        d.push(cur[0]);
        if let Some(m) = m.as_mut() {
            m.push(cur[1]);
        }
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mlp_forward".into()));
    }
    Ok(MlpOutput { d, m })
}
