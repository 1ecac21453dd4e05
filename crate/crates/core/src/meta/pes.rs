//! Persistent evolution strategies over truncated unrolls.
//!
//! Particles come in antithetic pairs. Each truncation a pair draws fresh
//! `eps ~ N(0, sigma^2 I)`; member 0 runs the segment at `theta + eps`,
//! member 1 at `theta - eps`, and the pair's accumulated perturbation `xi`
//! grows by `eps` (member 1's is `-xi`). The estimate is
//! `1/(n sigma^2) * sum_i mean_loss_i * xi_i`, reduced in particle-index order
//! so results do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{label, Rng};
use crate::tree::ParamTree;

use super::es::{gaussian_like, is_divergence};

/// Result of running one particle for up to `k` inner steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub mean_loss: f64,
    pub steps: u64,
    /// The particle's unroll is complete and it must be respawned.
    pub finished: bool,
}

pub trait Particle: Send {
    /// Runs up to `k` inner steps with meta-parameters `meta`. Divergence is
    /// reported as an error ([`Error::Diverged`], [`Error::NonFinite`] or
    /// [`Error::ExpOverflow`]).
    fn unroll(&mut self, meta: &ParamTree, k: u64) -> Result<Segment>;
}

pub trait ParticleFactory: Sync {
    type P: Particle;

    /// A fresh particle for a task identified by `seed`. Both members of an
    /// antithetic pair are spawned from the same seed.
    fn spawn(&self, seed: u64) -> Result<Self::P>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Estimator {
    /// Weights by the accumulated perturbation `xi` (unbiased).
    Pes,
    /// Weights by the current segment's `eps` only (biased under truncation).
    TruncatedEs,
}

/// One antithetic pair and its accumulated perturbation.
#[derive(Clone, Debug)]
pub struct Pair<P> {
    pub members: [P; 2],
    pub task_seed: u64,
    pub xi: ParamTree,
    pub rng: Rng,
}

impl<P> Pair<P> {
    /// Perturbation of member `m` (0 or 1).
    pub fn member_xi(&self, m: usize) -> ParamTree {
        if m == 0 {
            self.xi.clone()
        } else {
            self.xi.map(|_, t| t.map(|v| -v))
        }
    }
}

/// Outcome of one truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct PesStep {
    pub grad: ParamTree,
    /// Mean segment loss over contributing particles.
    pub mean_loss: f64,
    /// Pairs that diverged and were respawned (their contribution is dropped).
    pub resets: u64,
    /// Pairs whose unroll completed this truncation.
    pub finished: u64,
    pub contributing: usize,
}

pub struct Pes<F: ParticleFactory> {
    pub factory: F,
    pub sigma: f64,
    pub estimator: Estimator,
    pub pairs: Vec<Pair<F::P>>,
}

fn spawn_pair<F: ParticleFactory>(factory: &F, rng: &mut Rng) -> Result<(u64, [F::P; 2])> {
    let seed = rng.next_u64();
    Ok((seed, [factory.spawn(seed)?, factory.spawn(seed)?]))
}

impl<F: ParticleFactory> Pes<F> {
    /// `n_particles` must be even; pair `j` draws from its own stream of `seed`.
    pub fn new(factory: F, theta: &ParamTree, n_particles: usize, sigma: f64, estimator: Estimator, seed: u64) -> Result<Self> {
        if n_particles == 0 || !n_particles.is_multiple_of(2) {
            return Err(Error::Config(format!("n_particles must be even and positive (got {n_particles})")));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        let pairs = (0..n_particles / 2)
            .map(|j| {
                let mut rng = Rng::new(seed, label("pes/pair") ^ j as u64);
                let (task_seed, members) = spawn_pair(&factory, &mut rng)?;
                Ok(Pair {
                    members,
                    task_seed,
                    xi: theta.zeros_like(),
                    rng,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            factory,
            sigma,
            estimator,
            pairs,
        })
    }

    pub fn n_particles(&self) -> usize {
        2 * self.pairs.len()
    }

    /// Runs every particle for `k` steps and returns the gradient estimate.
    pub fn step(&mut self, theta: &ParamTree, k: u64) -> Result<PesStep> {
        let factory = &self.factory;
        let sigma = self.sigma;
        let estimator = self.estimator;
        let run = |pair: &mut Pair<F::P>| -> Result<PairOutcome> {
            let eps = gaussian_like(theta, sigma, &mut pair.rng);
            pair.xi = pair.xi.add(&eps)?;
            let plus = theta.add(&eps)?;
            let minus = theta.zip2(&eps, |_, a, b| a.sub(b))?;
            let [m0, m1] = &mut pair.members;
            let (r0, r1) = (m0.unroll(&plus, k), m1.unroll(&minus, k));
            let outcome = match (r0, r1) {
                (Ok(s0), Ok(s1)) if s0.mean_loss.is_finite() && s1.mean_loss.is_finite() => {
                    let dir = match estimator {
                        Estimator::Pes => pair.xi.clone(),
                        Estimator::TruncatedEs => eps,
                    };
                    let finished = s0.finished || s1.finished;
                    if finished {
                        let (seed, members) = spawn_pair(factory, &mut pair.rng)?;
                        pair.task_seed = seed;
                        pair.members = members;
                        pair.xi = pair.xi.zeros_like();
                    }
                    PairOutcome::Contrib {
                        losses: [s0.mean_loss, s1.mean_loss],
                        dir,
                        finished,
                    }
                }
                (Err(e), _) | (_, Err(e)) if !is_divergence(&e) => return Err(e),
                _ => {
                    log::debug!("pair diverged; respawning");
                    let (seed, members) = spawn_pair(factory, &mut pair.rng)?;
                    pair.task_seed = seed;
                    pair.members = members;
                    pair.xi = pair.xi.zeros_like();
                    PairOutcome::Reset
                }
            };
            Ok(outcome)
        };
        let outcomes: Vec<Result<PairOutcome>> = self.pairs.par_iter_mut().map(run).collect();

        let mut acc: Vec<Vec<f64>> = theta.tensors().map(|t| vec![0.0; t.len()]).collect();
        let (mut loss_sum, mut contributing, mut resets, mut finished) = (0.0, 0usize, 0u64, 0u64);
        for o in outcomes {
            match o? {
                PairOutcome::Reset => resets += 1,
                PairOutcome::Contrib { losses, dir, finished: f } => {
                    contributing += 2;
                    loss_sum += losses[0] + losses[1];
                    finished += u64::from(f);
                    // member 1 carries -dir
                    let w = losses[0] - losses[1];
                    for (a, (_, d)) in acc.iter_mut().zip(dir.iter()) {
                        for (x, &dv) in a.iter_mut().zip(d.data()) {
                            *x += w * f64::from(dv);
                        }
                    }
                }
            }
        }
        let scale = if contributing == 0 {
            0.0
        } else {
            1.0 / (contributing as f64 * sigma * sigma)
        };
        let grad = ParamTree::new(
            theta
                .iter()
                .zip(acc)
                .map(|((p, t), a)| {
                    let v = a.into_iter().map(|x| (x * scale) as f32).collect();
                    (p.to_string(), crate::tensor::Tensor::new(t.shape().to_vec(), v).expect("shape preserved"))
                })
                .collect(),
        )?;
        Ok(PesStep {
            grad,
            mean_loss: if contributing == 0 { f64::NAN } else { loss_sum / contributing as f64 },
            resets,
            finished,
            contributing,
        })
    }
}

enum PairOutcome {
    Reset,
    Contrib {
        losses: [f64; 2],
        dir: ParamTree,
        finished: bool,
    },
}
