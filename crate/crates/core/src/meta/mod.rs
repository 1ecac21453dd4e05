//! Meta-training of the learned rule with evolution strategies.

mod es;
mod lopt;
mod pes;
mod run;
mod train;

pub use es::{es_gradient, gaussian_like, EsEstimate};
pub use lopt::{sample_unroll_length, InnerSettings, LoptFactory, LoptParticle};
pub use pes::{Estimator, Pair, Particle, ParticleFactory, Pes, PesStep, Segment};
pub use run::{run_metatrain, step_file_name, MetaRunReport, RunOptions, LOG_FILE, RULE_FILE};
pub use train::{MetaLogRecord, MetaObjective, MetaTrainConfig, MetaTrainer};
