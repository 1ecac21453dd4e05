use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tree::ParamTree;

use super::{OptState, Transform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b1 > 0.0 && self.b1 < 1.0 && self.b2 > 0.0 && self.b2 < 1.0) {
            return Err(Error::Config("adam betas must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

fn cast<T: Float>(x: f64) -> T {
    T::from(x).expect("f64 converts to any Float")
}

/// First and second moment EMAs.
pub fn adam_moments<T: Float>(g: T, m: T, v: T, b1: T, b2: T) -> (T, T) {
    let one = T::one();
    (b1 * m + (one - b1) * g, b2 * v + (one - b2) * g * g)
}

/// Bias-corrected Adam direction at step `t` (1-based).
pub fn adam_direction<T: Float>(m: T, v: T, b1: T, b2: T, eps: T, t: i32) -> T {
    let one = T::one();
    let m_hat = m / (one - b1.powi(t));
    let v_hat = v / (one - b2.powi(t));
    m_hat / (v_hat.sqrt() + eps)
}

/// One scalar AdamW step at step `t` (1-based): returns `(p', m', v')`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Float>(p: T, g: T, m: T, v: T, t: i32, lr: T, wd: T, cfg: &AdamConfig) -> (T, T, T) {
    let (b1, b2, eps) = (cast::<T>(cfg.b1), cast::<T>(cfg.b2), cast::<T>(cfg.eps));
    let (m, v) = adam_moments(g, m, v, b1, b2);
    let dir = adam_direction(m, v, b1, b2, eps, t);
    (p - lr * (dir + wd * p), m, v)
}

/// Bias-corrected Adam scaling (no learning rate, no weight decay).
pub struct ScaleByAdam(pub AdamConfig);

impl Transform for ScaleByAdam {
    fn init(&self, params: &ParamTree) -> Result<OptState> {
        Ok(OptState::Adam {
            count: 0,
            mu: params.zeros_like(),
            nu: params.zeros_like(),
        })
    }

    fn update(&self, grads: &ParamTree, state: &mut OptState, _: &ParamTree) -> Result<ParamTree> {
        let OptState::Adam { count, mu, nu } = state else {
            return Err(Error::State("Adam"));
        };
        grads.check_same_structure(mu)?;
        let t = i32::try_from(*count + 1).unwrap_or(i32::MAX);
        let c = &self.0;
        let mut updates = Vec::with_capacity(grads.len());
        for (((path, g), (_, m)), (_, v)) in grads.iter().zip(mu.iter_mut()).zip(nu.iter_mut()) {
            let mut u = vec![0.0f32; g.len()];
            for (((gi, mi), vi), ui) in g.data().iter().zip(m.data_mut()).zip(v.data_mut()).zip(u.iter_mut()) {
                let (nm, nv) = adam_moments(f64::from(*gi), f64::from(*mi), f64::from(*vi), c.b1, c.b2);
                *mi = nm as f32;
                *vi = nv as f32;
                *ui = adam_direction(nm, nv, c.b1, c.b2, c.eps, t) as f32;
            }
            let u = Tensor::new(g.shape().to_vec(), u)?;
            u.ensure_finite("scale_by_adam")?;
            updates.push((path.to_string(), u));
        }
        *count += 1;
        ParamTree::new(updates)
    }
}
