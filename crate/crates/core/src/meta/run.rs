//! Meta-training driver: the outer loop plus its files.
//!
//! Output directory layout:
//! `meta_log.csv` (one row per outer step), `step_XXXX.lopt` META_STATE
//! checkpoints every `checkpoint_every` steps and at the end, and a final
//! `rule.lopt` RULE checkpoint.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, MetaCheckpoint, Payload, RuleCheckpoint};
use crate::error::{Error, Result};

use super::train::{MetaLogRecord, MetaTrainConfig, MetaTrainer};

pub const LOG_FILE: &str = "meta_log.csv";
pub const RULE_FILE: &str = "rule.lopt";

pub fn step_file_name(step: u64) -> String {
    format!("step_{step:04}.lopt")
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaRunReport {
    pub final_step: u64,
    pub records: Vec<MetaLogRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub rule_path: PathBuf,
}

/// Keeps the header and every row with `step <= keep_through`.
fn truncate_log(path: &Path, keep_through: u64) -> Result<()> {
    let mut kept = vec![MetaLogRecord::HEADER.to_string()];
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s <= keep_through) {
                kept.push(line);
            }
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_meta(out: &Path, trainer: &MetaTrainer) -> Result<PathBuf> {
    let path = out.join(step_file_name(trainer.step));
    checkpoint::save(&path, &Payload::Meta(Box::new(trainer.snapshot())))?;
    Ok(path)
}

/// Runs (or resumes) meta-training until `cfg.outer_steps` outer steps are done.
pub fn run_metatrain(cfg: MetaTrainConfig, out: &Path, resume: Option<MetaCheckpoint>, opts: &RunOptions) -> Result<MetaRunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let mut trainer = match resume {
        Some(ckpt) => {
            if ckpt.config.rule != cfg.rule || ckpt.config.accumulators != cfg.accumulators {
                return Err(Error::Config("resume checkpoint was trained with a different rule config".into()));
            }
            let step = ckpt.step;
            // the run continues under the requested config (e.g. more outer steps)
            let ckpt = MetaCheckpoint { config: cfg.clone(), ..ckpt };
            truncate_log(&log_path, step)?;
            MetaTrainer::restore(ckpt, cfg.data_dir.as_deref())?
        }
        None => {
            truncate_log(&log_path, 0)?;
            MetaTrainer::new(cfg.clone(), cfg.data_dir.as_deref())?
        }
    };
    trainer.deterministic = opts.deterministic;
    let mut log = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.step < cfg.outer_steps {
        let rec = trainer.step_once()?;
        writeln!(log, "{}", rec.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        if rec.step % 100 == 0 {
            log::info!("outer step {}: meta_loss {:.4}, resets {}", rec.step, rec.meta_loss, rec.resets);
        }
        records.push(rec);
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < cfg.outer_steps {
            checkpoints.push(save_meta(out, &trainer)?);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    checkpoints.push(save_meta(out, &trainer)?);
    let rule_path = out.join(RULE_FILE);
    let rule = RuleCheckpoint {
        rule_config: cfg.rule.clone(),
        accumulator_config: cfg.accumulators.clone(),
        seed: cfg.seed,
        theta: trainer.rule_params()?,
    };
    checkpoint::save(&rule_path, &Payload::Rule(rule))?;
    Ok(MetaRunReport {
        final_step: trainer.step,
        records,
        checkpoints,
        rule_path,
    })
}
