//! Evaluation harness: train a task with a named optimizer, sweep learning
//! rates, and write metrics.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::MetaTrainConfig;
use crate::optim::{AdamConfig, LearnedRule, OptimizerName, Pipeline, Schedule, ScheduleKind};
use crate::tasks::{init_task, DataSplit, Split, TaskSpec};

/// Learning-rate grid for the learned optimizers and AdamW.
pub const CELO_LR_GRID: [f64; 7] = [1e-5, 2.15e-5, 4.6e-5, 1e-4, 2.15e-4, 4.64e-4, 1e-3];
/// Muon learning-rate grid, as published.
pub const MUON_LR_GRID: [f64; 10] = [0.0001, 0.000215, 0.000464, 0.001, 0.00215, 0.00464, 0.01, 0.215, 0.464, 1.0];
pub const WEIGHT_DECAY_GRID: [f64; 3] = [0.0, 0.1, 10.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Grids {
    pub celo: Vec<f64>,
    pub muon: Vec<f64>,
    pub weight_decay: Vec<f64>,
}

pub fn default_grids() -> Grids {
    Grids {
        celo: CELO_LR_GRID.to_vec(),
        muon: MUON_LR_GRID.to_vec(),
        weight_decay: WEIGHT_DECAY_GRID.to_vec(),
    }
}

/// Schedule shape; the peak comes from the run's learning rate and the
/// length from `steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub warmup_frac: f64,
    pub end_lr: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Constant,
            warmup_frac: 0.0,
            end_lr: 0.0,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self, lr: f64, steps: u64) -> Schedule {
        Schedule {
            kind: self.kind,
            peak_lr: lr,
            warmup_frac: self.warmup_frac,
            total_steps: steps,
            end_lr: self.end_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub optimizer: OptimizerName,
    /// Rule checkpoint for the learned optimizers (RULE or META_STATE).
    pub checkpoint: Option<PathBuf>,
    pub task: TaskSpec,
    pub steps: u64,
    pub schedule: ScheduleSpec,
    pub weight_decay: f64,
    pub lr: Option<f64>,
    pub lr_grid: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub eval_every: u32,
    pub adam: AdamConfig,
    pub data_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerName::Adamw,
            checkpoint: None,
            task: TaskSpec::default(),
            steps: 500,
            schedule: ScheduleSpec::default(),
            weight_decay: 0.0,
            lr: None,
            lr_grid: None,
            seeds: vec![0],
            eval_every: 50,
            adam: AdamConfig::default(),
            data_dir: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer.is_learned() && self.checkpoint.is_none() {
            return Err(Error::Config(format!("{} requires a checkpoint", self.optimizer)));
        }
        if self.steps == 0 || self.eval_every == 0 {
            return Err(Error::Config("steps and eval_every must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let Some(g) = &self.lr_grid {
            if g.is_empty() {
                return Err(Error::Config("lr_grid is empty".into()));
            }
        }
        for lr in self.lr.iter().chain(self.lr_grid.iter().flatten()) {
            if !(*lr >= 0.0) {
                return Err(Error::Config(format!("invalid learning rate {lr}")));
            }
        }
        self.schedule.build(1.0, self.steps).validate()?;
        self.adam.validate()?;
        self.task.validate()
    }

    /// Grid to sweep: `lr_grid`, else `lr`, else the optimizer's default grid.
    pub fn grid(&self) -> Vec<f64> {
        if let Some(g) = &self.lr_grid {
            return g.clone();
        }
        if let Some(lr) = self.lr {
            return vec![lr];
        }
        match self.optimizer {
            OptimizerName::Muon => MUON_LR_GRID.to_vec(),
            _ => CELO_LR_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub grad_norm: f64,
    pub param_norm: f64,
    pub update_rms: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,train_loss,val_loss,val_accuracy,grad_norm,param_norm,update_rms,lr,wall_ms";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.train_loss,
            self.val_loss,
            self.val_accuracy,
            self.grad_norm,
            self.param_norm,
            self.update_rms,
            self.lr,
            self.wall_ms
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Ok,
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub lr: f64,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub status: RunStatus,
    pub final_val_loss: f64,
    /// Mean training-batch loss over every step that ran.
    pub mean_train_loss: f64,
}

/// Runtime knobs that do not change results.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Report `wall_ms = 0`.
    pub deterministic: bool,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diverged { .. } | Error::NonFinite(_) | Error::ExpOverflow(_))
}

/// Trains `cfg.task` (with `seed`) for `cfg.steps` steps at peak rate `lr`.
pub fn run_eval(
    cfg: &EvalConfig,
    lr: f64,
    seed: u64,
    learned: Option<&LearnedRule>,
    data: Arc<DataSplit>,
    opts: RunOptions,
) -> Result<RunResult> {
    let spec = TaskSpec {
        seed,
        ..cfg.task.clone()
    };
    let mut task = init_task(&spec, data)?;
    let pipeline = Pipeline::named(cfg.optimizer, learned, &cfg.adam, cfg.weight_decay, cfg.schedule.build(lr, cfg.steps))?;
    let mut state = crate::optim::Transform::init(&pipeline, &task.params)?;
    let start = Instant::now();
    let mut records = Vec::new();
    let mut status = RunStatus::Ok;
    let mut loss_sum = 0.0;
    let mut steps_run = 0u64;
    for t in 0..cfg.steps {
        let step = (|| -> Result<(f64, f64, crate::optim::StepStats)> {
            let (loss, grads) = task.train_loss_and_grad()?;
            let grad_norm = grads.global_norm();
            let (updates, stats) = pipeline.update_with_stats(&grads, &mut state, &task.params)?;
            task.apply(&updates)?;
            Ok((loss, grad_norm, stats))
        })();
        let (loss, grad_norm, stats) = match step {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                log::warn!("{} lr={lr} seed={seed} diverged at step {t}: {e}", cfg.optimizer);
                status = RunStatus::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        loss_sum += loss;
        steps_run += 1;
        let n = t + 1;
        if n % u64::from(cfg.eval_every) == 0 || n == cfg.steps {
            let (val_loss, val_accuracy) = task.evaluate(Split::Val)?;
            records.push(MetricsRecord {
                step: n,
                train_loss: loss,
                val_loss,
                val_accuracy,
                grad_norm,
                param_norm: task.params.global_norm(),
                update_rms: stats.update_rms,
                lr: stats.lr,
                wall_ms: if opts.deterministic {
                    0
                } else {
                    start.elapsed().as_millis() as u64
                },
            });
        }
    }
    let final_val_loss = match status {
        RunStatus::Ok => records.last().map_or(f64::NAN, |r| r.val_loss),
        RunStatus::Diverged => f64::NAN,
    };
    Ok(RunResult {
        lr,
        seed,
        records,
        status,
        final_val_loss,
        mean_train_loss: if steps_run == 0 { f64::NAN } else { loss_sum / steps_run as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lr: f64,
    pub seed: u64,
    pub final_val_loss: Option<f64>,
    /// Mean training-batch loss over the steps that ran.
    pub mean_train_loss: Option<f64>,
    pub status: RunStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRun {
    pub lr: f64,
    pub final_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<RunSummary>,
    pub best: Option<BestRun>,
}

/// Picks the learning rate with the lowest mean `score` over seeds. Rates
/// with any diverged run are excluded; ties go to the lower rate.
pub fn select_best(results: &[RunResult], score: impl Fn(&RunResult) -> f64) -> Option<BestRun> {
    let mut lrs: Vec<f64> = results.iter().map(|r| r.lr).collect();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    let mut best: Option<BestRun> = None;
    for lr in lrs {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.lr == lr).collect();
        if runs.iter().any(|r| r.status == RunStatus::Diverged) {
            continue;
        }
        let mean = runs.iter().map(|r| score(r)).sum::<f64>() / runs.len() as f64;
        if !mean.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| mean < b.final_val_loss) {
            best = Some(BestRun {
                lr,
                final_val_loss: mean,
            });
        }
    }
    best
}

pub fn summarize(results: &[RunResult]) -> SweepSummary {
    SweepSummary {
        runs: results
            .iter()
            .map(|r| RunSummary {
                lr: r.lr,
                seed: r.seed,
                final_val_loss: r.final_val_loss.is_finite().then_some(r.final_val_loss),
                mean_train_loss: r.mean_train_loss.is_finite().then_some(r.mean_train_loss),
                status: r.status,
            })
            .collect(),
        best: select_best(results, |r| r.final_val_loss),
    }
}

/// Loads the task data for `seed`, honoring `data_dir`.
pub fn load_task_data(cfg: &EvalConfig, seed: u64) -> Result<Arc<DataSplit>> {
    Ok(Arc::new(cfg.task.dataset.load(seed, cfg.data_dir.as_deref())?))
}

/// One run per `(lr, seed)`; runs execute in parallel and are returned in grid order.
pub fn run_sweep(cfg: &EvalConfig, learned: Option<&LearnedRule>, opts: RunOptions) -> Result<(Vec<RunResult>, SweepSummary)> {
    cfg.validate()?;
    let data: Vec<Arc<DataSplit>> = cfg.seeds.iter().map(|&s| load_task_data(cfg, s)).collect::<Result<_>>()?;
    let jobs: Vec<(f64, usize)> = cfg
        .grid()
        .into_iter()
        .flat_map(|lr| (0..cfg.seeds.len()).map(move |i| (lr, i)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(lr, i)| run_eval(cfg, lr, cfg.seeds[i], learned, data[i].clone(), opts))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&results);
    Ok((results, summary))
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// File name for one run's metrics.
pub fn run_file_name(lr: f64, seed: u64) -> String {
    format!("lr{lr:e}_seed{seed}.csv")
}

/// Writes per-run CSVs under `out/runs/` and `out/summary.json`.
pub fn write_sweep(out: &Path, results: &[RunResult], summary: &SweepSummary) -> Result<()> {
    for r in results {
        write_metrics_csv(&out.join("runs").join(run_file_name(r.lr, r.seed)), &r.records)?;
    }
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&out.join("summary.json"), format!("{json}\n").as_bytes())
}

/// An eval config that mirrors a meta-training task distribution's blobs task.
pub fn eval_task_from_meta(meta: &MetaTrainConfig) -> TaskSpec {
    TaskSpec {
        dataset: meta.tasks.blobs.clone(),
        batch_size: meta.tasks.batch_size,
        model: meta.tasks.model.clone(),
        seed: 0,
        augment: crate::tasks::AugmentSpec::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{DatasetSpec, MlpSpec};

    fn cfg() -> EvalConfig {
        EvalConfig {
            task: TaskSpec {
                dataset: DatasetSpec::SynthBlobs {
                    classes: 3,
                    dim: 6,
                    separation: 3.0,
                    n_train: 96,
                    n_val: 48,
                },
                batch_size: 16,
                model: MlpSpec { hidden: vec![8] },
                ..Default::default()
            },
            steps: 30,
            eval_every: 10,
            ..Default::default()
        }
    }

    fn result(lr: f64, seed: u64, loss: f64, status: RunStatus) -> RunResult {
        RunResult {
            lr,
            seed,
            records: vec![],
            status,
            final_val_loss: loss,
            mean_train_loss: loss,
        }
    }

    #[test]
    fn grids_match_published_lists() {
        let g = default_grids();
        assert_eq!(g.celo, vec![1e-5, 2.15e-5, 4.6e-5, 1e-4, 2.15e-4, 4.64e-4, 1e-3]);
        assert_eq!(g.muon.len(), 10);
        assert_eq!(g.muon[0], 0.0001);
        assert_eq!(g.muon[9], 1.0);
        assert_eq!(g.weight_decay, vec![0.0, 0.1, 10.0]);
    }

    #[test]
    fn celo_grid_is_log_spaced() {
        let g = CELO_LR_GRID;
        let step = (g[6] / g[0]).ln() / 6.0;
        for (i, v) in g.iter().enumerate() {
            let ideal = (g[0].ln() + step * i as f64).exp();
            // published values are rounded to three significant digits
            assert!((v / ideal - 1.0).abs() < 1e-2, "{v} vs {ideal}");
        }
    }

    #[test]
    fn zero_lr_freezes_params() {
        let c = EvalConfig {
            weight_decay: 0.1,
            ..cfg()
        };
        let data = load_task_data(&c, 0).unwrap();
        let init = init_task(&c.task, data.clone()).unwrap().params.global_norm();
        let r = run_eval(&c, 0.0, 0, None, data, RunOptions::default()).unwrap();
        assert_eq!(r.status, RunStatus::Ok);
        for rec in &r.records {
            assert_eq!(rec.param_norm, init);
        }
    }

    #[test]
    fn adamw_trains() {
        let c = cfg();
        let data = load_task_data(&c, 1).unwrap();
        let r = run_eval(&c, 1e-2, 1, None, data, RunOptions::default()).unwrap();
        assert_eq!(r.records.len(), 3);
        assert_eq!(r.records.iter().map(|x| x.step).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert!(r.records[2].train_loss < (3f64).ln());
    }

    #[test]
    fn best_selection_rules() {
        let rs = vec![
            result(1e-3, 0, 0.5, RunStatus::Ok),
            result(1e-3, 1, 0.7, RunStatus::Ok),
            result(1e-4, 0, 0.6, RunStatus::Ok),
            result(1e-4, 1, 0.6, RunStatus::Ok),
            result(1e-2, 0, 0.1, RunStatus::Ok),
            result(1e-2, 1, f64::NAN, RunStatus::Diverged),
        ];
        let best = summarize(&rs).best.unwrap();
        // tie at 0.6 between 1e-4 and 1e-3 -> lower lr; 1e-2 excluded
        assert_eq!(best.lr, 1e-4);
        let mut rev = rs.clone();
        rev.reverse();
        assert_eq!(summarize(&rev).best, summarize(&rs).best);
        let single = vec![result(0.1, 0, 0.3, RunStatus::Ok)];
        assert_eq!(summarize(&single).best.unwrap().final_val_loss, 0.3);
    }

    #[test]
    fn sweep_is_deterministic() {
        let c = EvalConfig {
            lr_grid: Some(vec![1e-3, 1e-2]),
            seeds: vec![0, 1],
            ..cfg()
        };
        let opts = RunOptions { deterministic: true };
        let (a, sa) = run_sweep(&c, None, opts).unwrap();
        let (b, sb) = run_sweep(&c, None, opts).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn learned_needs_checkpoint() {
        let c = EvalConfig {
            optimizer: OptimizerName::Celo2,
            ..cfg()
        };
        assert!(c.validate().is_err());
    }
}
