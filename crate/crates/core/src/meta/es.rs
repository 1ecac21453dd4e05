use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tree::ParamTree;

/// Gaussian perturbation `sigma * N(0, I)` shaped like `like`, drawn in path order.
pub fn gaussian_like(like: &ParamTree, sigma: f64, rng: &mut Rng) -> ParamTree {
    let entries = like
        .iter()
        .map(|(p, t)| {
            let v = (0..t.len()).map(|_| (sigma * rng.normal()) as f32).collect();
            (p.to_string(), Tensor::new(t.shape().to_vec(), v).expect("length matches shape"))
        })
        .collect();
    ParamTree::new(entries).expect("paths come from a valid tree")
}

pub(crate) fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diverged { .. } | Error::NonFinite(_) | Error::ExpOverflow(_))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsEstimate {
    pub grad: ParamTree,
    /// Antithetic pairs dropped because the objective was not finite.
    pub dropped: usize,
}

/// Antithetic ES estimate `1/(n sigma^2) * sum_i J(theta + eps_i) eps_i` with
/// `n / 2` pairs `(eps, -eps)`, `eps ~ N(0, sigma^2 I)`. Pairs with a
/// non-finite objective are dropped and `n` shrinks accordingly.
pub fn es_gradient(
    objective: impl Fn(&ParamTree) -> Result<f64>,
    theta: &ParamTree,
    n: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Result<EsEstimate> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!("ES needs an even, positive sample count (got {n})")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config("sigma must be positive".into()));
    }
    let mut acc: Vec<Vec<f64>> = theta.tensors().map(|t| vec![0.0; t.len()]).collect();
    let mut used = 0usize;
    let mut dropped = 0usize;
    for _ in 0..n / 2 {
        let eps = gaussian_like(theta, sigma, rng);
        let plus = objective(&theta.add(&eps)?);
        let minus = objective(&theta.zip2(&eps, |_, a, b| a.sub(b))?);
        let (jp, jm) = match (plus, minus) {
            (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
            (Err(e), _) | (_, Err(e)) if !is_divergence(&e) => return Err(e),
            _ => {
                dropped += 1;
                continue;
            }
        };
        used += 2;
        let w = jp - jm;
        for (a, (_, e)) in acc.iter_mut().zip(eps.iter()) {
            for (x, &ev) in a.iter_mut().zip(e.data()) {
                *x += w * f64::from(ev);
            }
        }
    }
    if dropped > 0 {
        log::warn!("es_gradient dropped {dropped} non-finite pair(s)");
    }
    let scale = if used == 0 { 0.0 } else { 1.0 / (used as f64 * sigma * sigma) };
    let entries = theta
        .iter()
        .zip(acc)
        .map(|((p, t), a)| {
            let v = a.into_iter().map(|x| (x * scale) as f32).collect();
            (p.to_string(), Tensor::new(t.shape().to_vec(), v).expect("shape preserved"))
        })
        .collect();
    Ok(EsEstimate {
        grad: ParamTree::new(entries)?,
        dropped,
    })
}
