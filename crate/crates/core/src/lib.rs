//! Learned optimizers with orthogonalized, normalized updates.
//!
//! The crate is organised bottom-up: dense [`Tensor`]s and named
//! [`ParamTree`]s, per-tensor rolling statistics ([`accumulators`]), the
//! learned update rule ([`rule`]), Optax-style gradient transformations
//! ([`optim`]), inner training tasks ([`tasks`]), evolution-strategies
//! meta-training ([`meta`]), `.lopt` checkpoints ([`checkpoint`]) and the
//! evaluation harness ([`eval`]).

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accumulators;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod meta;
pub mod optim;
pub mod rng;
pub mod rule;
pub mod tasks;
pub mod tensor;
pub mod tree;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
pub use tree::{Label, ParamLabels, ParamTree};
