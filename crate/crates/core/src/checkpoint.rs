//! `.lopt` checkpoints.
//!
//! One pretty-printed JSON document: a `header` (format version, kind,
//! rule and accumulator configs, feature channel order, seed, and for
//! META_STATE files the outer step, config and a structural skeleton of every
//! optimizer/particle state) plus a flat `tensors` list. Each tensor is stored
//! as base64 of its little-endian f32 bytes with a CRC32 of those bytes, so a
//! corrupted payload names the damaged tensor. Writes go through a temporary
//! file and a rename.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::accumulators::{AccumulatorConfig, CeloState, Factored, TensorAccumulators, TensorSlot};
use crate::error::{Error, Result};
use crate::meta::{LoptFactory, MetaTrainConfig, MetaTrainer, Pair, ParticleFactory, Pes};
use crate::optim::{LearnedRule, OptState};
use crate::rng::{Rng, RngState};
use crate::rule::{UpdateRuleConfig, UpdateRuleParams, CHANNEL_NAMES};
use crate::tensor::Tensor;
use crate::tree::{Label, ParamTree};

pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "lopt";
pub const DTYPE: &str = "f32";
pub const ENCODING: &str = "base64-le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckpointKind {
    Rule,
    MetaState,
}

/// Structural description of an [`OptState`]; tensors are referenced by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSkeleton {
    Empty,
    Count(u64),
    Adam { count: u64, mu: TreeRef, nu: TreeRef },
    Trace { momentum: TreeRef },
    Celo { step: u64, slots: Vec<SlotRef> },
    Chain(Vec<StateSkeleton>),
    Multi(Vec<(Label, StateSkeleton)>),
}

/// A [`ParamTree`] stored as `{prefix}/{path}` tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeRef {
    pub prefix: String,
    pub paths: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotRef {
    pub path: String,
    /// `row_col` or `diag`.
    pub factored: String,
    pub output_rms_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleHeader {
    pub seed: u64,
    pub step: u64,
    pub unroll_len: u64,
    pub data_rng: RngState,
    pub params: TreeRef,
    pub opt_state: StateSkeleton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairHeader {
    pub task_seed: u64,
    pub rng: RngState,
    pub xi: TreeRef,
    pub members: [ParticleHeader; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaHeader {
    pub step: u64,
    pub config: MetaTrainConfig,
    pub outer_state: StateSkeleton,
    pub pairs: Vec<PairHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub update_rule_config: UpdateRuleConfig,
    pub accumulator_config: AccumulatorConfig,
    pub channel_order: Vec<String>,
    pub created_by: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub encoding: String,
    pub crc32: u32,
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub header: Header,
    pub tensors: Vec<TensorRecord>,
}

/// A trained (or initial) update rule.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleCheckpoint {
    pub rule_config: UpdateRuleConfig,
    pub accumulator_config: AccumulatorConfig,
    pub seed: u64,
    pub theta: UpdateRuleParams,
}

impl RuleCheckpoint {
    pub fn learned_rule(&self) -> LearnedRule {
        LearnedRule {
            theta: std::sync::Arc::new(self.theta.clone()),
            cfg: self.rule_config.clone(),
            acc_cfg: self.accumulator_config.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub seed: u64,
    pub step: u64,
    pub unroll_len: u64,
    pub data_rng: RngState,
    pub params: ParamTree,
    pub opt_state: OptState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairState {
    pub task_seed: u64,
    pub rng: RngState,
    pub xi: ParamTree,
    pub members: [ParticleState; 2],
}

/// Everything needed to continue meta-training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaCheckpoint {
    pub config: MetaTrainConfig,
    pub step: u64,
    pub theta: ParamTree,
    pub outer_state: OptState,
    pub pairs: Vec<PairState>,
}

impl MetaCheckpoint {
    pub fn rule(&self) -> Result<RuleCheckpoint> {
        Ok(RuleCheckpoint {
            rule_config: self.config.rule.clone(),
            accumulator_config: self.config.accumulators.clone(),
            seed: self.config.seed,
            theta: UpdateRuleParams::from_tree(&self.theta, &self.config.rule)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Rule(RuleCheckpoint),
    Meta(Box<MetaCheckpoint>),
}

impl Payload {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Payload::Rule(_) => CheckpointKind::Rule,
            Payload::Meta(_) => CheckpointKind::MetaState,
        }
    }

    /// The update rule, from either kind.
    pub fn rule(&self) -> Result<RuleCheckpoint> {
        match self {
            Payload::Rule(r) => Ok(r.clone()),
            Payload::Meta(m) => m.rule(),
        }
    }
}

pub fn created_by() -> String {
    format!("lopt-core {}", env!("CARGO_PKG_VERSION"))
}

// ---- tensor encoding ----

fn encode_tensor(name: &str, t: &Tensor) -> TensorRecord {
    let mut bytes = Vec::with_capacity(4 * t.len());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorRecord {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: DTYPE.into(),
        encoding: ENCODING.into(),
        crc32: crc32fast::hash(&bytes),
        data: B64.encode(&bytes),
    }
}

fn decode_tensor(r: &TensorRecord) -> Result<Tensor> {
    if r.dtype != DTYPE || r.encoding != ENCODING {
        return Err(Error::Format(format!(
            "tensor '{}': unsupported dtype/encoding {}/{}",
            r.name, r.dtype, r.encoding
        )));
    }
    let bytes = B64.decode(r.data.as_bytes()).map_err(|_| Error::Checksum(r.name.clone()))?;
    if crc32fast::hash(&bytes) != r.crc32 {
        return Err(Error::Checksum(r.name.clone()));
    }
    let n: usize = r.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "tensor '{}': {} bytes for shape {:?}",
            r.name,
            bytes.len(),
            r.shape
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(r.shape.clone(), data)
}

/// Collects tensors while building a skeleton.
#[derive(Default)]
struct Writer {
    tensors: Vec<TensorRecord>,
}

impl Writer {
    fn put(&mut self, name: String, t: &Tensor) -> String {
        self.tensors.push(encode_tensor(&name, t));
        name
    }

    fn tree(&mut self, prefix: &str, tree: &ParamTree) -> TreeRef {
        for (p, t) in tree.iter() {
            self.put(format!("{prefix}/{p}"), t);
        }
        TreeRef {
            prefix: prefix.to_string(),
            paths: tree.paths().map(str::to_string).collect(),
        }
    }

    fn state(&mut self, prefix: &str, s: &OptState) -> StateSkeleton {
        match s {
            OptState::Empty => StateSkeleton::Empty,
            OptState::Count(c) => StateSkeleton::Count(*c),
            OptState::Adam { count, mu, nu } => StateSkeleton::Adam {
                count: *count,
                mu: self.tree(&format!("{prefix}/mu"), mu),
                nu: self.tree(&format!("{prefix}/nu"), nu),
            },
            OptState::Trace { momentum } => StateSkeleton::Trace {
                momentum: self.tree(&format!("{prefix}/momentum"), momentum),
            },
            OptState::Celo(c) => StateSkeleton::Celo {
                step: c.step,
                slots: c
                    .slots
                    .iter()
                    .map(|(path, slot)| {
                        let base = format!("{prefix}/{path}");
                        self.put(format!("{base}/mom"), &slot.acc.mom);
                        self.put(format!("{base}/rms"), &slot.acc.rms);
                        let factored = match &slot.acc.factored {
                            Factored::RowCol { v_row, v_col } => {
                                self.put(format!("{base}/v_row"), v_row);
                                self.put(format!("{base}/v_col"), v_col);
                                "row_col"
                            }
                            Factored::Diag { v_diag } => {
                                self.put(format!("{base}/v_diag"), v_diag);
                                "diag"
                            }
                        };
                        SlotRef {
                            path: path.clone(),
                            factored: factored.into(),
                            output_rms_sum: slot.output_rms_sum,
                        }
                    })
                    .collect(),
            },
            OptState::Chain(parts) => StateSkeleton::Chain(
                parts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| self.state(&format!("{prefix}/{i}"), p))
                    .collect(),
            ),
            OptState::Multi(parts) => StateSkeleton::Multi(
                parts
                    .iter()
                    .map(|(l, p)| {
                        let tag = match l {
                            Label::LearnedRule => "learned",
                            Label::HandRule => "hand",
                        };
                        (*l, self.state(&format!("{prefix}/{tag}"), p))
                    })
                    .collect(),
            ),
        }
    }
}

/// Hands out decoded tensors by name; every tensor must be consumed.
struct Reader {
    tensors: BTreeMap<String, Tensor>,
}

impl Reader {
    fn new(records: &[TensorRecord]) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for r in records {
            if tensors.insert(r.name.clone(), decode_tensor(r)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor '{}'", r.name)));
            }
        }
        Ok(Self { tensors })
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    fn tree(&mut self, r: &TreeRef) -> Result<ParamTree> {
        let entries = r
            .paths
            .iter()
            .map(|p| Ok((p.clone(), self.take(&format!("{}/{p}", r.prefix))?)))
            .collect::<Result<Vec<_>>>()?;
        ParamTree::new(entries)
    }

    fn state(&mut self, prefix: &str, s: &StateSkeleton) -> Result<OptState> {
        Ok(match s {
            StateSkeleton::Empty => OptState::Empty,
            StateSkeleton::Count(c) => OptState::Count(*c),
            StateSkeleton::Adam { count, mu, nu } => OptState::Adam {
                count: *count,
                mu: self.tree(mu)?,
                nu: self.tree(nu)?,
            },
            StateSkeleton::Trace { momentum } => OptState::Trace {
                momentum: self.tree(momentum)?,
            },
            StateSkeleton::Celo { step, slots } => {
                let mut out = Vec::with_capacity(slots.len());
                for s in slots {
                    let base = format!("{prefix}/{}", s.path);
                    let mom = self.take(&format!("{base}/mom"))?;
                    let rms = self.take(&format!("{base}/rms"))?;
                    let factored = match s.factored.as_str() {
                        "row_col" => Factored::RowCol {
                            v_row: self.take(&format!("{base}/v_row"))?,
                            v_col: self.take(&format!("{base}/v_col"))?,
                        },
                        "diag" => Factored::Diag {
                            v_diag: self.take(&format!("{base}/v_diag"))?,
                        },
                        other => return Err(Error::Format(format!("unknown factored kind '{other}'"))),
                    };
                    out.push((
                        s.path.clone(),
                        TensorSlot {
                            acc: TensorAccumulators { mom, rms, factored },
                            output_rms_sum: s.output_rms_sum,
                        },
                    ));
                }
                OptState::Celo(CeloState { step: *step, slots: out })
            }
            StateSkeleton::Chain(parts) => OptState::Chain(
                parts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| self.state(&format!("{prefix}/{i}"), p))
                    .collect::<Result<_>>()?,
            ),
            StateSkeleton::Multi(parts) => OptState::Multi(
                parts
                    .iter()
                    .map(|(l, p)| {
                        let tag = match l {
                            Label::LearnedRule => "learned",
                            Label::HandRule => "hand",
                        };
                        Ok((*l, self.state(&format!("{prefix}/{tag}"), p)?))
                    })
                    .collect::<Result<_>>()?,
            ),
        })
    }

    fn finish(self) -> Result<()> {
        match self.tensors.keys().next() {
            Some(name) => Err(Error::Format(format!("unreferenced tensor '{name}'"))),
            None => Ok(()),
        }
    }
}

// ---- payload <-> file ----

fn rule_tensors(w: &mut Writer, theta: &ParamTree) {
    w.tree("theta", theta);
}

pub fn to_file(payload: &Payload) -> CheckpointFile {
    let mut w = Writer::default();
    let channel_order = CHANNEL_NAMES.iter().map(|s| s.to_string()).collect();
    let header = match payload {
        Payload::Rule(r) => {
            rule_tensors(&mut w, &r.theta.to_tree());
            Header {
                format_version: FORMAT_VERSION,
                kind: CheckpointKind::Rule,
                update_rule_config: r.rule_config.clone(),
                accumulator_config: r.accumulator_config.clone(),
                channel_order,
                created_by: created_by(),
                seed: r.seed,
                meta: None,
            }
        }
        Payload::Meta(m) => {
            rule_tensors(&mut w, &m.theta);
            let outer_state = w.state("outer", &m.outer_state);
            let pairs = m
                .pairs
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let xi = w.tree(&format!("pair{j}/xi"), &p.xi);
                    let member = |w: &mut Writer, i: usize| {
                        let s = &p.members[i];
                        let base = format!("pair{j}/member{i}");
                        ParticleHeader {
                            seed: s.seed,
                            step: s.step,
                            unroll_len: s.unroll_len,
                            data_rng: s.data_rng,
                            params: w.tree(&format!("{base}/params"), &s.params),
                            opt_state: w.state(&format!("{base}/opt"), &s.opt_state),
                        }
                    };
                    let m0 = member(&mut w, 0);
                    let m1 = member(&mut w, 1);
                    PairHeader {
                        task_seed: p.task_seed,
                        rng: p.rng,
                        xi,
                        members: [m0, m1],
                    }
                })
                .collect();
            Header {
                format_version: FORMAT_VERSION,
                kind: CheckpointKind::MetaState,
                update_rule_config: m.config.rule.clone(),
                accumulator_config: m.config.accumulators.clone(),
                channel_order,
                created_by: created_by(),
                seed: m.config.seed,
                meta: Some(MetaHeader {
                    step: m.step,
                    config: m.config.clone(),
                    outer_state,
                    pairs,
                }),
            }
        }
    };
    CheckpointFile {
        header,
        tensors: w.tensors,
    }
}

pub fn from_file(file: &CheckpointFile) -> Result<Payload> {
    let h = &file.header;
    if h.format_version != FORMAT_VERSION {
        return Err(Error::Version(format!("format_version {} (supported: {FORMAT_VERSION})", h.format_version)));
    }
    if h.channel_order.iter().map(String::as_str).ne(CHANNEL_NAMES.iter().copied()) {
        return Err(Error::Format(format!(
            "channel_order {:?} does not match this build's {:?}",
            h.channel_order, CHANNEL_NAMES
        )));
    }
    h.update_rule_config.validate()?;
    h.accumulator_config.validate()?;
    let mut r = Reader::new(&file.tensors)?;
    let theta_paths: Vec<String> = file
        .tensors
        .iter()
        .filter_map(|t| t.name.strip_prefix("theta/").map(str::to_string))
        .collect();
    let theta = r.tree(&TreeRef {
        prefix: "theta".into(),
        paths: theta_paths,
    })?;
    // architecture check happens before anything else uses the weights
    let rule = UpdateRuleParams::from_tree(&theta, &h.update_rule_config)?;
    let payload = match (h.kind, &h.meta) {
        (CheckpointKind::Rule, None) => Payload::Rule(RuleCheckpoint {
            rule_config: h.update_rule_config.clone(),
            accumulator_config: h.accumulator_config.clone(),
            seed: h.seed,
            theta: rule,
        }),
        (CheckpointKind::MetaState, Some(m)) => {
            if m.config.rule != h.update_rule_config || m.config.accumulators != h.accumulator_config {
                return Err(Error::Format("meta config disagrees with header configs".into()));
            }
            m.config.validate()?;
            let outer_state = r.state("outer", &m.outer_state)?;
            let mut pairs = Vec::with_capacity(m.pairs.len());
            for (j, p) in m.pairs.iter().enumerate() {
                let xi = r.tree(&p.xi)?;
                let mut members = Vec::with_capacity(2);
                for (i, s) in p.members.iter().enumerate() {
                    members.push(ParticleState {
                        seed: s.seed,
                        step: s.step,
                        unroll_len: s.unroll_len,
                        data_rng: s.data_rng,
                        params: r.tree(&s.params)?,
                        opt_state: r.state(&format!("pair{j}/member{i}/opt"), &s.opt_state)?,
                    });
                }
                let [m0, m1]: [ParticleState; 2] = members.try_into().expect("two members");
                pairs.push(PairState {
                    task_seed: p.task_seed,
                    rng: p.rng,
                    xi,
                    members: [m0, m1],
                });
            }
            Payload::Meta(Box::new(MetaCheckpoint {
                config: m.config.clone(),
                step: m.step,
                theta,
                outer_state,
                pairs,
            }))
        }
        (kind, _) => return Err(Error::Format(format!("{kind:?} header has inconsistent meta section"))),
    };
    r.finish()?;
    Ok(payload)
}

pub fn encode(payload: &Payload) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&to_file(payload)).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn json_err(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    if msg.contains("unknown field") || msg.contains("unknown variant") {
        Error::Version(msg)
    } else {
        Error::Format(msg)
    }
}

pub fn decode(text: &str) -> Result<Payload> {
    let value: Value = serde_json::from_str(text).map_err(json_err)?;
    // version gate before any typed parsing so newer files fail as a version error
    match value.pointer("/header/format_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Version(format!("format_version {v} (supported: {FORMAT_VERSION})"))),
        None => return Err(Error::Format("missing header.format_version".into())),
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(json_err)?;
    from_file(&file)
}

/// Writes `payload` to `path` atomically.
pub fn save(path: &Path, payload: &Payload) -> Result<()> {
    let text = encode(payload)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Payload> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&text)
}

/// Parses only as far as the header (tensors are checked too).
pub fn load_file(path: &Path) -> Result<CheckpointFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(json_err)?;
    from_file(&file)?;
    Ok(file)
}

/// Loads the update rule from a RULE or META_STATE checkpoint.
pub fn load_rule(path: &Path) -> Result<RuleCheckpoint> {
    load(path)?.rule()
}

/// Decoded tensors of a checkpoint, in file order.
pub fn tensors(file: &CheckpointFile) -> Result<Vec<(String, Tensor)>> {
    file.tensors.iter().map(|r| Ok((r.name.clone(), decode_tensor(r)?))).collect()
}

// ---- meta trainer snapshots ----

impl MetaTrainer {
    pub fn snapshot(&self) -> MetaCheckpoint {
        MetaCheckpoint {
            config: self.cfg.clone(),
            step: self.step,
            theta: self.theta.clone(),
            outer_state: self.outer_state.clone(),
            pairs: self
                .pes
                .pairs
                .iter()
                .map(|p| PairState {
                    task_seed: p.task_seed,
                    rng: p.rng.state(),
                    xi: p.xi.clone(),
                    members: [0, 1].map(|i| {
                        let m = &p.members[i];
                        ParticleState {
                            seed: m.seed,
                            step: m.task.step,
                            unroll_len: m.unroll_len,
                            data_rng: m.task.data_rng.state(),
                            params: m.task.params.clone(),
                            opt_state: m.opt_state.clone(),
                        }
                    }),
                })
                .collect(),
        }
    }

    /// Rebuilds a trainer from a snapshot. Tasks are regenerated from their
    /// seeds and then overwritten with the saved dynamic state.
    pub fn restore(ckpt: MetaCheckpoint, data_dir: Option<&Path>) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.theta.check_same_structure(&ckpt.config.initial_theta().to_tree())?;
        if ckpt.pairs.len() * 2 != ckpt.config.n_particles as usize {
            return Err(Error::Format(format!(
                "{} pairs stored for n_particles = {}",
                ckpt.pairs.len(),
                ckpt.config.n_particles
            )));
        }
        let factory: LoptFactory = MetaTrainer::factory(&ckpt.config, data_dir)?;
        let mut pairs = Vec::with_capacity(ckpt.pairs.len());
        for p in ckpt.pairs {
            p.xi.check_same_structure(&ckpt.theta)?;
            let mut members = Vec::with_capacity(2);
            for s in p.members {
                let mut part = factory.spawn(s.seed)?;
                s.params.check_same_structure(&part.task.params)?;
                part.task.params = s.params;
                part.task.step = s.step;
                part.task.data_rng = Rng::from_state(s.data_rng);
                part.unroll_len = s.unroll_len;
                part.opt_state = s.opt_state;
                members.push(part);
            }
            let [m0, m1]: [_; 2] = members.try_into().map_err(|_| Error::Format("pair size".into()))?;
            pairs.push(Pair {
                members: [m0, m1],
                task_seed: p.task_seed,
                xi: p.xi,
                rng: Rng::from_state(p.rng),
            });
        }
        let pes = Pes {
            factory,
            sigma: ckpt.config.sigma,
            estimator: ckpt.config.estimator,
            pairs,
        };
        Ok(MetaTrainer::from_parts(ckpt.config, ckpt.theta, ckpt.outer_state, pes, ckpt.step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(seed: u64) -> RuleCheckpoint {
        let cfg = UpdateRuleConfig::default();
        RuleCheckpoint {
            theta: UpdateRuleParams::init(&cfg, &mut Rng::new(seed, 0)),
            rule_config: cfg,
            accumulator_config: AccumulatorConfig::default(),
            seed,
        }
    }

    #[test]
    fn rule_round_trip_and_reencode() {
        let p = Payload::Rule(rule(3));
        let text = encode(&p).unwrap();
        let back = decode(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode(&back).unwrap(), text);
    }

    #[test]
    fn corrupt_byte_names_tensor() {
        let mut file = to_file(&Payload::Rule(rule(1)));
        let rec = &mut file.tensors[2];
        let mut bytes = B64.decode(&rec.data).unwrap();
        bytes[5] ^= 0x01;
        rec.data = B64.encode(&bytes);
        let name = rec.name.clone();
        match from_file(&file) {
            Err(Error::Checksum(n)) => assert_eq!(n, name),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_unknown_fields_rejected() {
        let text = encode(&Payload::Rule(rule(1))).unwrap();
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["header"]["format_version"] = 2.into();
        assert!(matches!(decode(&v.to_string()), Err(Error::Version(_))));
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["header"]["future_field"] = true.into();
        assert!(matches!(decode(&v.to_string()), Err(Error::Version(_))));
    }

    #[test]
    fn channel_order_checked() {
        let mut file = to_file(&Payload::Rule(rule(1)));
        file.header.channel_order.swap(0, 1);
        assert!(matches!(from_file(&file), Err(Error::Format(_))));
    }

    #[test]
    fn hidden_size_mismatch_fails() {
        let mut file = to_file(&Payload::Rule(rule(1)));
        file.header.update_rule_config.hidden_size = 16;
        assert!(matches!(from_file(&file), Err(Error::Shape { .. }) | Err(Error::Structure(_))));
    }

    #[test]
    fn special_floats_survive() {
        let mut r = rule(0);
        let w = r.theta.layers[0].0.data_mut();
        w[0] = f32::MIN_POSITIVE / 3.0;
        w[1] = -0.0;
        w[2] = f32::MAX;
        let p = Payload::Rule(r);
        let back = decode(&encode(&p).unwrap()).unwrap();
        let Payload::Rule(b) = back else { panic!() };
        let Payload::Rule(a) = p else { panic!() };
        for (x, y) in a.theta.layers[0].0.data().iter().zip(b.theta.layers[0].0.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn meta_snapshot_round_trip() {
        let cfg = MetaTrainConfig {
            k: 3,
            unroll_min: 5,
            unroll_max: 9,
            n_particles: 2,
            ..Default::default()
        };
        let mut t = MetaTrainer::new(cfg, None).unwrap();
        t.step_once().unwrap();
        let snap = t.snapshot();
        let p = Payload::Meta(Box::new(snap.clone()));
        let text = encode(&p).unwrap();
        assert_eq!(decode(&text).unwrap(), p);
        let t2 = MetaTrainer::restore(snap.clone(), None).unwrap();
        assert_eq!(t2.snapshot(), snap);
    }

    #[test]
    fn resumed_run_continues_identically() {
        let cfg = MetaTrainConfig {
            k: 4,
            unroll_min: 6,
            unroll_max: 12,
            n_particles: 4,
            ..Default::default()
        };
        let mut a = MetaTrainer::new(cfg, None).unwrap();
        a.deterministic = true;
        for _ in 0..3 {
            a.step_once().unwrap();
        }
        let text = encode(&Payload::Meta(Box::new(a.snapshot()))).unwrap();
        let Payload::Meta(m) = decode(&text).unwrap() else { panic!() };
        let mut b = MetaTrainer::restore(*m, None).unwrap();
        b.deterministic = true;
        for _ in 0..5 {
            assert_eq!(a.step_once().unwrap(), b.step_once().unwrap());
        }
        assert_eq!(a.theta, b.theta);
    }
}
