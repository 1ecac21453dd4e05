//! `lopt`: meta-train, evaluate, sweep and inspect learned optimizers.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lopt_core::checkpoint::{self, CheckpointKind, Payload};
use lopt_core::eval::{self, EvalConfig, RunOptions};
use lopt_core::meta::{self, MetaTrainConfig};
use lopt_core::tasks::{DatasetSpec, TaskSpec};
use lopt_core::Error;

const DATA_DIR_ENV: &str = "LOPT_DATA_DIR";
const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Parser, Debug)]
#[command(name = "lopt", version, about = "Learned optimizer meta-training and evaluation")]
struct Cli {
    /// Single-threaded execution and zeroed wall-clock columns, for byte-identical outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for PES particles and sweep runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train an update rule with PES.
    Metatrain(MetatrainArgs),
    /// Train a task with one optimizer at one learning rate.
    Eval(EvalArgs),
    /// Learning-rate sweep from a config file.
    Sweep(SweepArgs),
    /// Print a checkpoint's header and tensor statistics.
    Inspect { checkpoint: PathBuf },
}

#[derive(Args, Debug)]
struct MetatrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Total outer steps (overrides `outer_steps`).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/metatrain")]
    out: PathBuf,
    /// META_STATE checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct EvalOverrides {
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `blobs`, `idx:DIR`, or a JSON task file.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    /// Repeatable; replaces the configured seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<u32>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
    #[command(flatten)]
    o: EvalOverrides,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
    #[command(flatten)]
    o: EvalOverrides,
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 3,
        };
        Self { code, msg: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Errors while reading inputs named on the command line are configuration errors.
fn as_config(e: Error) -> Failure {
    Failure::config(e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
}

fn write_resolved<T: Serialize>(out: &Path, cfg: &T) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let path = out.join(RESOLVED_CONFIG);
    let mut text = serde_json::to_string_pretty(cfg).map_err(|e| Failure::config(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn data_dir_fallback(flag: Option<PathBuf>, file: Option<PathBuf>) -> Option<PathBuf> {
    flag.or(file).or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

fn parse_task(s: &str) -> CliResult<TaskSpec> {
    if s == "blobs" {
        return Ok(TaskSpec::default());
    }
    if let Some(dir) = s.strip_prefix("idx:") {
        return Ok(TaskSpec {
            dataset: DatasetSpec::IdxFile {
                path: dir.into(),
                val_fraction: 0.1,
            },
            ..TaskSpec::default()
        });
    }
    if s.ends_with(".json") {
        return read_json(Path::new(s));
    }
    Err(Failure::config(format!("unknown task '{s}' (expected blobs, idx:DIR or a .json task file)")))
}

fn apply_overrides(cfg: &mut EvalConfig, o: EvalOverrides) -> CliResult<()> {
    if let Some(name) = o.optimizer {
        cfg.optimizer = name.parse().map_err(as_config)?;
    }
    if let Some(c) = o.checkpoint {
        cfg.checkpoint = Some(c);
    }
    if let Some(t) = o.task {
        cfg.task = parse_task(&t)?;
    }
    if let Some(s) = o.steps {
        cfg.steps = s;
    }
    if !o.seeds.is_empty() {
        cfg.seeds = o.seeds;
    }
    if let Some(w) = o.weight_decay {
        cfg.weight_decay = w;
    }
    if let Some(e) = o.eval_every {
        cfg.eval_every = e;
    }
    cfg.data_dir = data_dir_fallback(o.data_dir, cfg.data_dir.take());
    Ok(())
}

fn cmd_metatrain(a: MetatrainArgs, deterministic: bool) -> CliResult<()> {
    let mut cfg: MetaTrainConfig = read_json(&a.config)?;
    if let Some(s) = a.steps {
        cfg.outer_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.data_dir = data_dir_fallback(a.data_dir, cfg.data_dir.take());
    cfg.validate().map_err(as_config)?;
    let resume = match &a.resume {
        Some(p) => match checkpoint::load(p).map_err(as_config)? {
            Payload::Meta(m) => Some(*m),
            Payload::Rule(_) => return Err(Failure::config(format!("{} is a RULE checkpoint; --resume needs META_STATE", p.display()))),
        },
        None => None,
    };
    write_resolved(&a.out, &cfg)?;
    let rep = meta::run_metatrain(cfg, &a.out, resume, &meta::RunOptions { deterministic })?;
    println!(
        "meta-training finished at step {}; rule checkpoint {}",
        rep.final_step,
        rep.rule_path.display()
    );
    Ok(())
}

fn run_eval_config(cfg: EvalConfig, out: &Path, deterministic: bool) -> CliResult<()> {
    cfg.validate().map_err(as_config)?;
    let learned = match (&cfg.checkpoint, cfg.optimizer.is_learned()) {
        (Some(p), true) => {
            let rule = checkpoint::load_rule(p).map_err(|e| Failure::config(format!("cannot load checkpoint {}: {e}", p.display())))?;
            Some(rule.learned_rule())
        }
        _ => None,
    };
    write_resolved(out, &cfg)?;
    let (results, summary) = eval::run_sweep(&cfg, learned.as_ref(), RunOptions { deterministic })?;
    eval::write_sweep(out, &results, &summary)?;
    for r in &summary.runs {
        let loss = r.final_val_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!("lr={:e} seed={} final_val_loss={} status={:?}", r.lr, r.seed, loss, r.status);
    }
    match &summary.best {
        Some(b) => println!("best lr={:e} final_val_loss={:.6}", b.lr, b.final_val_loss),
        None => println!("no learning rate completed without divergence"),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, deterministic: bool) -> CliResult<()> {
    let mut cfg: EvalConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    apply_overrides(&mut cfg, a.o)?;
    if let Some(lr) = a.lr {
        cfg.lr = Some(lr);
    }
    let lr = cfg.lr.ok_or_else(|| Failure::config("eval needs --lr (or `lr` in the config)"))?;
    cfg.lr_grid = None;
    cfg.lr = Some(lr);
    run_eval_config(cfg, &a.out, deterministic)
}

fn cmd_sweep(a: SweepArgs, deterministic: bool) -> CliResult<()> {
    let mut cfg: EvalConfig = read_json(&a.config)?;
    apply_overrides(&mut cfg, a.o)?;
    if cfg.lr_grid.is_none() && cfg.lr.is_none() {
        cfg.lr_grid = Some(cfg.grid());
    }
    run_eval_config(cfg, &a.out, deterministic)
}

fn cmd_inspect(path: &Path) -> CliResult<()> {
    let file = checkpoint::load_file(path)?;
    let h = &file.header;
    println!("file: {}", path.display());
    println!("format_version: {}", h.format_version);
    println!("kind: {}", match h.kind {
        CheckpointKind::Rule => "RULE",
        CheckpointKind::MetaState => "META_STATE",
    });
    println!("created_by: {}", h.created_by);
    println!("seed: {}", h.seed);
    println!("channel_order ({}): {}", h.channel_order.len(), h.channel_order.join(", "));
    println!("update_rule_config: {}", compact(&h.update_rule_config));
    println!("accumulator_config: {}", compact(&h.accumulator_config));
    if let Some(m) = &h.meta {
        println!("outer_step: {}", m.step);
        println!("pairs: {}", m.pairs.len());
    }
    println!("tensors: {}", file.tensors.len());
    println!("{:<48} {:>14} {:>14} {:>14} {:>14}", "name", "shape", "min", "max", "rms");
    for (name, t) in checkpoint::tensors(&file)? {
        let (lo, hi) = t
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        println!(
            "{:<48} {:>14} {:>14.6e} {:>14.6e} {:>14.6e}",
            name,
            format!("{:?}", t.shape()),
            lo,
            hi,
            t.rms()
        );
    }
    Ok(())
}

fn compact<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| format!("<{e}>"))
}

fn configure_threads(deterministic: bool, jobs: Option<usize>) -> CliResult<()> {
    let n = if deterministic { Some(1) } else { jobs };
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure { code: 3, msg: e.to_string() })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" })).init();
    let det = cli.deterministic;
    let result = configure_threads(det, cli.jobs).and_then(|()| match cli.cmd {
        Command::Metatrain(a) => cmd_metatrain(a, det),
        Command::Eval(a) => cmd_eval(a, det),
        Command::Sweep(a) => cmd_sweep(a, det),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
