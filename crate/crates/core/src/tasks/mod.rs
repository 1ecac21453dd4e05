//! Inner training problems for the learned optimizer.
//!
//! Tasks are small MLP classifiers on 8x8 image features or synthetic
//! Gaussian blobs. Task augmentation reparameterizes the model: the optimizer
//! sees `alpha * theta` while the loss is evaluated at the underlying
//! `theta`, so the optimizer faces parameters (and gradients, scaled by
//! `1 / alpha`) over many orders of magnitude without the loss landscape
//! itself changing.

pub mod data;
pub mod mlp;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{label, Rng};
use crate::tensor::Tensor;
use crate::tree::ParamTree;

pub use data::{load_idx_8x8, synth_blobs, DataSplit, Dataset};
pub use mlp::{evaluate, init_mlp, loss_and_grad};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetSpec {
    /// Directory holding IDX training files. Relative paths resolve against `data_dir`.
    IdxFile {
        path: PathBuf,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    SynthBlobs {
        classes: usize,
        dim: usize,
        separation: f64,
        n_train: usize,
        n_val: usize,
    },
}

fn default_val_fraction() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn blobs_default() -> Self {
        DatasetSpec::SynthBlobs {
            classes: 4,
            dim: 16,
            separation: 3.0,
            n_train: 512,
            n_val: 256,
        }
    }

    /// Loads or generates the data. Deterministic in `seed`.
    pub fn load(&self, seed: u64, data_dir: Option<&Path>) -> Result<DataSplit> {
        let mut rng = Rng::new(seed, label("task/data"));
        match self {
            DatasetSpec::SynthBlobs {
                classes,
                dim,
                separation,
                n_train,
                n_val,
            } => synth_blobs(*classes, *dim, *separation, *n_train, *n_val, &mut rng),
            DatasetSpec::IdxFile { path, val_fraction } => {
                let full = match data_dir {
                    Some(d) if path.is_relative() => d.join(path),
                    _ => path.clone(),
                };
                load_idx_8x8(&full, *val_fraction, &mut rng)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSpec {
    /// Hidden layer widths; input and output widths come from the dataset.
    pub hidden: Vec<usize>,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self { hidden: vec![32] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Granularity {
    Global,
    PerTensor,
    PerParam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub granularity: Granularity,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            alpha_min: 0.001,
            alpha_max: 1000.0,
            granularity: Granularity::Global,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min > 0.0 && self.alpha_min < self.alpha_max) {
            return Err(Error::Config(format!(
                "augmentation needs 0 < alpha_min < alpha_max (got {}, {})",
                self.alpha_min, self.alpha_max
            )));
        }
        Ok(())
    }

    /// `exp(U(ln alpha_min, ln alpha_max))`.
    pub fn sample_alpha(&self, rng: &mut Rng) -> f64 {
        rng.uniform(self.alpha_min.ln(), self.alpha_max.ln()).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub dataset: DatasetSpec,
    pub batch_size: u32,
    pub model: MlpSpec,
    pub seed: u64,
    pub augment: AugmentSpec,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::blobs_default(),
            batch_size: 128,
            model: MlpSpec::default(),
            seed: 0,
            augment: AugmentSpec::default(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let DatasetSpec::SynthBlobs { n_train, classes, .. } = &self.dataset {
            if (self.batch_size as usize) > *n_train {
                return Err(Error::Config(format!(
                    "batch_size {} exceeds n_train {n_train}",
                    self.batch_size
                )));
            }
            if *classes < 2 {
                return Err(Error::Config("blobs need at least 2 classes".into()));
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.augment.enabled {
            self.augment.validate()?;
        }
        Ok(())
    }

    pub fn widths(&self, data: &DataSplit) -> Vec<usize> {
        let mut w = vec![data.train.dim];
        w.extend(&self.model.hidden);
        w.push(data.train.classes);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A live inner problem: data, current (visible) parameters and samplers.
#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub data: Arc<DataSplit>,
    pub batch_size: usize,
    /// Parameters as the optimizer sees them (`alpha * theta`).
    pub params: ParamTree,
    /// Per-element reparameterization scale; all ones without augmentation.
    pub alpha: ParamTree,
    pub applied_alpha: f64,
    pub data_rng: Rng,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

/// Draws model parameters and the augmentation scale for `spec`.
pub fn init_task(spec: &TaskSpec, data: Arc<DataSplit>) -> Result<TaskInstance> {
    spec.validate()?;
    let theta = init_mlp(&spec.widths(&data), &mut Rng::new(spec.seed, label("task/init")))?;
    let mut arng = Rng::new(spec.seed, label("task/alpha"));
    let alpha = if spec.augment.enabled {
        let aug = &spec.augment;
        let global = aug.sample_alpha(&mut arng);
        let entries = theta
            .iter()
            .map(|(p, t)| {
                let a = match aug.granularity {
                    Granularity::Global => Tensor::full(t.shape(), global as f32),
                    Granularity::PerTensor => Tensor::full(t.shape(), aug.sample_alpha(&mut arng) as f32),
                    Granularity::PerParam => {
                        let v = (0..t.len()).map(|_| aug.sample_alpha(&mut arng) as f32).collect();
                        Tensor::new(t.shape().to_vec(), v).expect("length matches shape")
                    }
                };
                (p.to_string(), a)
            })
            .collect();
        ParamTree::new(entries)?
    } else {
        theta.map(|_, t| Tensor::full(t.shape(), 1.0))
    };
    // geometric mean of the scales (the scale itself for global augmentation)
    let applied_alpha = match (spec.augment.enabled, spec.augment.granularity) {
        (false, _) => 1.0,
        (true, Granularity::Global) => f64::from(alpha.iter().next().map_or(1.0, |(_, t)| t.data()[0])),
        (true, _) => {
            let logs: Vec<f64> = alpha.flatten().iter().map(|&a| f64::from(a).ln()).collect();
            (logs.iter().sum::<f64>() / logs.len().max(1) as f64).exp()
        }
    };
    let params = theta.zip2(&alpha, |_, t, a| t.zip_map(a, |t, a| t * a))?;
    Ok(TaskInstance {
        data,
        batch_size: spec.batch_size as usize,
        params,
        alpha,
        applied_alpha,
        data_rng: Rng::new(spec.seed, label("task/batches")),
        step: 0,
        loss_history: Vec::new(),
    })
}

impl TaskInstance {
    /// Underlying model parameters `params / alpha`.
    pub fn true_params(&self, visible: &ParamTree) -> Result<ParamTree> {
        visible.zip2(&self.alpha, |_, p, a| p.zip_map(a, |p, a| p / a))
    }

    /// Samples a training batch with replacement.
    pub fn next_batch(&mut self) -> Dataset {
        let n = self.data.train.len();
        let idx: Vec<usize> = (0..self.batch_size).map(|_| self.data_rng.below(n)).collect();
        self.data.train.gather(&idx)
    }

    /// Loss and gradient with respect to the visible parameters.
    pub fn loss_and_grad_at(&self, visible: &ParamTree, batch: &Dataset) -> Result<(f64, ParamTree)> {
        let theta = self.true_params(visible)?;
        let (loss, g) = loss_and_grad(&theta, batch)?;
        Ok((loss, g.zip2(&self.alpha, |_, g, a| g.zip_map(a, |g, a| g / a))?))
    }

    /// Samples a batch and differentiates at the current parameters. A
    /// non-finite loss becomes [`Error::Diverged`] tagged with the step.
    pub fn train_loss_and_grad(&mut self) -> Result<(f64, ParamTree)> {
        let batch = self.next_batch();
        match self.loss_and_grad_at(&self.params, &batch) {
            Ok((loss, g)) => {
                self.loss_history.push(loss);
                Ok((loss, g))
            }
            Err(Error::NonFinite(_)) => Err(Error::Diverged {
                step: self.step,
                loss: f64::NAN,
            }),
            Err(e) => Err(e),
        }
    }

    /// `params += updates`; fails with [`Error::Diverged`] on non-finite results.
    pub fn apply(&mut self, updates: &ParamTree) -> Result<()> {
        let next = self.params.zip2(updates, |_, p, u| p.zip_map(u, |p, u| p + u))?;
        if !next.all_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: f64::NAN,
            });
        }
        self.params = next;
        self.step += 1;
        Ok(())
    }

    /// Full-split loss and accuracy at the current parameters.
    pub fn evaluate(&self, split: Split) -> Result<(f64, f64)> {
        let data = match split {
            Split::Train => &self.data.train,
            Split::Val => &self.data.val,
        };
        evaluate(&self.true_params(&self.params)?, data)
    }
}

/// Where meta-training draws its tasks from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskDistributionConfig {
    /// Dataset directory names under `data_dir`; missing ones are skipped.
    pub idx_datasets: Vec<String>,
    /// Used when no IDX dataset is available.
    pub blobs: DatasetSpec,
    pub model: MlpSpec,
    pub batch_size: u32,
    pub augment: AugmentSpec,
}

impl Default for TaskDistributionConfig {
    fn default() -> Self {
        Self {
            idx_datasets: Vec::new(),
            blobs: DatasetSpec::blobs_default(),
            model: MlpSpec { hidden: vec![16] },
            batch_size: 32,
            augment: AugmentSpec {
                enabled: true,
                ..AugmentSpec::default()
            },
        }
    }
}

/// Samples fresh tasks: uniformly over the loaded IDX datasets, or blobs
/// (regenerated per task seed) when none are present.
#[derive(Clone, Debug)]
pub struct TaskDistribution {
    cfg: TaskDistributionConfig,
    idx: Vec<Arc<DataSplit>>,
}

impl TaskDistribution {
    pub fn new(cfg: TaskDistributionConfig, data_dir: Option<&Path>) -> Result<Self> {
        let mut idx = Vec::new();
        if let Some(dir) = data_dir {
            for name in &cfg.idx_datasets {
                let path = dir.join(name);
                if data::idx_available(&path) {
                    idx.push(Arc::new(load_idx_8x8(&path, 0.1, &mut Rng::new(0, label("task/data")))?));
                } else {
                    log::warn!("dataset {} not found, skipping", path.display());
                }
            }
        }
        let probe = TaskSpec {
            dataset: cfg.blobs.clone(),
            batch_size: cfg.batch_size,
            model: cfg.model.clone(),
            seed: 0,
            augment: cfg.augment.clone(),
        };
        probe.validate()?;
        Ok(Self { cfg, idx })
    }

    pub fn config(&self) -> &TaskDistributionConfig {
        &self.cfg
    }

    pub fn num_idx_datasets(&self) -> usize {
        self.idx.len()
    }

    /// A fresh task for `seed`.
    pub fn sample(&self, seed: u64) -> Result<TaskInstance> {
        let spec = TaskSpec {
            dataset: self.cfg.blobs.clone(),
            batch_size: self.cfg.batch_size,
            model: self.cfg.model.clone(),
            seed,
            augment: self.cfg.augment.clone(),
        };
        let data = if self.idx.is_empty() {
            Arc::new(spec.dataset.load(seed, None)?)
        } else {
            let pick = Rng::new(seed, label("task/pick")).below(self.idx.len());
            self.idx[pick].clone()
        };
        init_task(&spec, data)
    }
}
